//! Window scoring and superpatch merging.
//!
//! Two merge policies are provided:
//!
//! * **dynamic** ([`merge_dcts`]): coarse-to-fine over window sides 16, 8, 4
//!   and 2 (in patch units). At each level the aligned, disjoint windows
//!   that contain no already-merged cell are scored, and a window merges
//!   iff its score is at least that level's threshold. Because windows are
//!   aligned, a finer window can never straddle a coarser merged one.
//! * **fixed top-K** ([`merge_cts_topk`]): scores every aligned 2x2 window
//!   and merges exactly the K best.
//!
//! Scores come from a [`WindowScorer`]. The built-in homogeneity scorer is
//! `exp(-k * s)` where `s` is the per-channel pixel standard deviation
//! averaged over channels and divided by 127.5; a file-backed scorer lets
//! externally computed policy outputs drive the same merge code.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{extract_pixels, GridError, PatchGrid, Superpatch, SuperpatchPartition};
use crate::pixel_io::Image;

/// Default sharpness of the homogeneity scorer.
pub const DEFAULT_HOMOGENEITY_K: f64 = 8.0;

/// Window sides visited by the dynamic merge, coarse first.
pub const MERGE_LEVELS: [usize; 4] = [16, 8, 4, 2];

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("no score for window size={size} row={row} col={col}")]
    MissingScore { size: usize, row: usize, col: usize },
    #[error("score file: {0}")]
    ScoreFile(String),
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("threshold {name}={value} outside [0, 1]")]
    InvalidThreshold { name: &'static str, value: f64 },
    #[error("homogeneity sharpness must be positive, got {0}")]
    InvalidSharpness(f64),
    #[error("cannot merge {requested} windows, only {available} aligned 2x2 windows exist")]
    TooManyMerges { requested: usize, available: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, MergeError>;

/// Per-level merge thresholds, indexed by window side in patch units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeThresholds {
    pub tau_2: f64,
    pub tau_4: f64,
    pub tau_8: f64,
    pub tau_16: f64,
}

impl MergeThresholds {
    /// `t4999`: 0.4 for 2x2 windows, 0.9 above.
    pub const T4999: Self = Self {
        tau_2: 0.4,
        tau_4: 0.9,
        tau_8: 0.9,
        tau_16: 0.9,
    };

    /// `t6899`: 0.6 / 0.8 / 0.9 / 0.9.
    pub const T6899: Self = Self {
        tau_2: 0.6,
        tau_4: 0.8,
        tau_8: 0.9,
        tau_16: 0.9,
    };

    pub fn new(tau_2: f64, tau_4: f64, tau_8: f64, tau_16: f64) -> Result<Self> {
        let t = Self {
            tau_2,
            tau_4,
            tau_8,
            tau_16,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "t4999" => Some(Self::T4999),
            "t6899" => Some(Self::T6899),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("tau_2", self.tau_2),
            ("tau_4", self.tau_4),
            ("tau_8", self.tau_8),
            ("tau_16", self.tau_16),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(MergeError::InvalidThreshold { name, value });
            }
        }
        Ok(())
    }

    pub fn for_size(&self, size: usize) -> f64 {
        match size {
            2 => self.tau_2,
            4 => self.tau_4,
            8 => self.tau_8,
            16 => self.tau_16,
            _ => panic!("no merge threshold for window side {size}"),
        }
    }
}

/// Produces a homogeneity probability in `[0, 1]` for a candidate window.
pub trait WindowScorer: Sync {
    fn score(&self, image: &Image, window: Superpatch) -> Result<f64>;
}

/// `exp(-k * mean_channel_std / 127.5)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomogeneityScorer {
    k: f64,
}

impl HomogeneityScorer {
    pub fn new(k: f64) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(MergeError::InvalidSharpness(k));
        }
        Ok(Self { k })
    }

    pub fn k(&self) -> f64 {
        self.k
    }
}

impl Default for HomogeneityScorer {
    fn default() -> Self {
        Self {
            k: DEFAULT_HOMOGENEITY_K,
        }
    }
}

/// Mean over channels of the population standard deviation, scaled by 1/127.5.
pub fn normalized_spread(block: &Image) -> f64 {
    let ch = block.channels();
    let n = (block.width() * block.height()) as f64;
    let mut total = 0.0;
    for c in 0..ch {
        let samples = || {
            block
                .data()
                .iter()
                .skip(c)
                .step_by(ch)
                .map(|&v| f64::from(v))
        };
        let mean = samples().sum::<f64>() / n;
        let var = samples().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        total += var.sqrt();
    }
    total / ch as f64 / 127.5
}

impl WindowScorer for HomogeneityScorer {
    fn score(&self, image: &Image, window: Superpatch) -> Result<f64> {
        let block = extract_pixels(image, window)?;
        Ok((-self.k * normalized_spread(&block)).exp())
    }
}

/// Scores loaded from a JSON object mapping `"size,row,col"` to a score.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreMap {
    scores: HashMap<(usize, usize, usize), f64>,
}

impl ScoreMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, window: Superpatch, score: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&score) {
            return Err(MergeError::ScoreOutOfRange(score));
        }
        self.scores
            .insert((window.size, window.row, window.col), score);
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: HashMap<String, f64> =
            serde_json::from_str(text).map_err(|e| MergeError::ScoreFile(e.to_string()))?;
        let mut map = Self::new();
        for (key, score) in raw {
            let parts: Vec<usize> = key
                .split(',')
                .map(|p| p.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| MergeError::ScoreFile(format!("bad key {key:?}")))?;
            let [size, row, col] = parts[..] else {
                return Err(MergeError::ScoreFile(format!("bad key {key:?}")));
            };
            map.insert(Superpatch::new(row, col, size), score)?;
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| MergeError::ScoreFile(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut entries: Vec<_> = self.scores.iter().collect();
        entries.sort_by_key(|(k, _)| **k);
        let obj: serde_json::Map<String, serde_json::Value> = entries
            .into_iter()
            .map(|(&(s, r, c), &v)| (format!("{s},{r},{c}"), serde_json::Value::from(v)))
            .collect();
        serde_json::Value::Object(obj).to_string()
    }
}

impl WindowScorer for ScoreMap {
    fn score(&self, _image: &Image, w: Superpatch) -> Result<f64> {
        self.scores
            .get(&(w.size, w.row, w.col))
            .copied()
            .ok_or(MergeError::MissingScore {
                size: w.size,
                row: w.row,
                col: w.col,
            })
    }
}

/// Where window scores come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ScoreSource {
    Homogeneity(HomogeneityScorer),
    File(ScoreMap),
}

impl Default for ScoreSource {
    fn default() -> Self {
        Self::Homogeneity(HomogeneityScorer::default())
    }
}

impl WindowScorer for ScoreSource {
    fn score(&self, image: &Image, window: Superpatch) -> Result<f64> {
        match self {
            Self::Homogeneity(h) => h.score(image, window),
            Self::File(m) => m.score(image, window),
        }
    }
}

pub fn score_window(image: &Image, window: Superpatch, source: &dyn WindowScorer) -> Result<f64> {
    source.score(image, window)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MergeMode {
    Dynamic(MergeThresholds),
    TopK(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeConfig {
    pub mode: MergeMode,
    pub source: ScoreSource,
}

impl MergeConfig {
    pub fn merge(&self, grid: &PatchGrid) -> Result<SuperpatchPartition> {
        match self.mode {
            MergeMode::Dynamic(t) => merge_dcts(grid, &t, &self.source),
            MergeMode::TopK(k) => merge_cts_topk(grid, k, &self.source),
        }
    }
}

/// Aligned windows of side `size` lying fully inside the grid, row-major.
fn aligned_windows(grid_h: usize, grid_w: usize, size: usize) -> Vec<Superpatch> {
    if size > grid_h || size > grid_w {
        return Vec::new();
    }
    (0..=grid_h - size)
        .step_by(size)
        .flat_map(|r| {
            (0..=grid_w - size)
                .step_by(size)
                .map(move |c| Superpatch::new(r, c, size))
        })
        .collect()
}

fn score_all(image: &Image, windows: &[Superpatch], scorer: &dyn WindowScorer) -> Result<Vec<f64>> {
    windows
        .par_iter()
        .map(|&w| {
            let s = scorer.score(image, w)?;
            if !(0.0..=1.0).contains(&s) {
                return Err(MergeError::ScoreOutOfRange(s));
            }
            Ok(s)
        })
        .collect()
}

fn fill_singletons(
    grid_h: usize,
    grid_w: usize,
    absorbed: &[bool],
    mut merged: Vec<Superpatch>,
) -> SuperpatchPartition {
    for (i, &taken) in absorbed.iter().enumerate() {
        if !taken {
            merged.push(Superpatch::new(i / grid_w, i % grid_w, 1));
        }
    }
    let mut p = SuperpatchPartition::from_patches(grid_h, grid_w, merged);
    p.sort_row_major();
    p
}

/// Coarse-to-fine threshold merge.
pub fn merge_dcts(
    grid: &PatchGrid,
    thresholds: &MergeThresholds,
    scorer: &dyn WindowScorer,
) -> Result<SuperpatchPartition> {
    thresholds.validate()?;
    let (gh, gw) = (grid.grid_h(), grid.grid_w());
    let mut absorbed = vec![false; gh * gw];
    let mut merged = Vec::new();
    for size in MERGE_LEVELS {
        let candidates: Vec<Superpatch> = aligned_windows(gh, gw, size)
            .into_iter()
            .filter(|w| w.cells().all(|(r, c)| !absorbed[r * gw + c]))
            .collect();
        let scores = score_all(grid.image(), &candidates, scorer)?;
        let tau = thresholds.for_size(size);
        for (w, s) in candidates.into_iter().zip(scores) {
            if s >= tau {
                for (r, c) in w.cells() {
                    absorbed[r * gw + c] = true;
                }
                merged.push(w);
            }
        }
    }
    Ok(fill_singletons(gh, gw, &absorbed, merged))
}

/// Merges exactly the `k` best-scoring aligned 2x2 windows; ties go to the
/// earlier window in row-major order.
pub fn merge_cts_topk(
    grid: &PatchGrid,
    k: usize,
    scorer: &dyn WindowScorer,
) -> Result<SuperpatchPartition> {
    let (gh, gw) = (grid.grid_h(), grid.grid_w());
    let windows = aligned_windows(gh, gw, 2);
    if k > windows.len() {
        return Err(MergeError::TooManyMerges {
            requested: k,
            available: windows.len(),
        });
    }
    let scores = score_all(grid.image(), &windows, scorer)?;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    // Stable sort keeps row-major order among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut absorbed = vec![false; gh * gw];
    let mut merged = Vec::with_capacity(k);
    for &i in &order[..k] {
        for (r, c) in windows[i].cells() {
            absorbed[r * gw + c] = true;
        }
        merged.push(windows[i]);
    }
    Ok(fill_singletons(gh, gw, &absorbed, merged))
}

/// Base cell count over superpatch count.
pub fn token_reduction_factor(p: &SuperpatchPartition) -> f64 {
    p.cells() as f64 / p.len() as f64
}
