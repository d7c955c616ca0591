//! Image in, per-pixel labels out: merge, embed, staged encode, assemble.

use thiserror::Error;

use crate::cost::{pipeline_cost_in_mode, CostError, CostReport, HaltSchedule};
use crate::early_exit::{
    assemble_predictions, halt_stage_map, pruned_fraction, ConfidenceHalting, ConfidenceOverride,
    HaltConfig, Predictions, PruneStats,
};
use crate::encoder::{
    init_model, run_stages, ArchConfig, ExecMode, ModelError, StageOutput, StagePlan,
};
use crate::grid::{make_grid, GridError, SuperpatchPartition, PATCH_PX};
use crate::merge::{MergeConfig, MergeError};
use crate::params::ParamStore;
use crate::pixel_io::{Image, LabelMap};
use crate::rng::derive_seed;
use crate::supertoken::{broadcast_labels, embed, PosEmbedTable, SupertokenError};
use crate::tensor::MacCounter;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Supertoken(#[from] SupertokenError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub arch: ArchConfig,
    pub merge: MergeConfig,
    pub halt: HaltConfig,
    pub plan: StagePlan,
    pub mode: ExecMode,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.plan.validate(self.arch.layers)?;
        self.halt.validate()?;
        Ok(())
    }
}

/// Seeded model ready to segment images.
pub struct Segmenter {
    config: PipelineConfig,
    params: ParamStore,
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    pub partition: SuperpatchPartition,
    pub crop_offset: (usize, usize),
    pub stages: StageOutput,
    pub predictions: Predictions,
    /// Patch-resolution labels.
    pub cell_labels: LabelMap,
    /// Labels at the input image size; pixels outside the cropped grid take
    /// the nearest cell's label.
    pub pixel_labels: LabelMap,
    pub halt_map: LabelMap,
    pub prune: PruneStats,
    pub cost: CostReport,
    pub macs: u64,
}

impl Segmenter {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let params = init_model(&config.arch, config.plan.len(), config.seed)?;
        Ok(Self { config, params })
    }

    pub fn with_params(config: PipelineConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn segment(
        &self,
        image: &Image,
        overrides: Option<&ConfidenceOverride>,
    ) -> Result<Segmentation> {
        let cfg = &self.config;
        let image = image.to_rgb();
        let grid = make_grid(&image)?;
        let partition = cfg.merge.merge(&grid)?;
        let (gh, gw) = (partition.grid_h(), partition.grid_w());
        let pos = PosEmbedTable::init(gh, gw, cfg.arch.dim, derive_seed(cfg.seed, "pos_embed"));

        let mut counter = MacCounter::new();
        let tokens = embed(
            &partition,
            grid.image(),
            &self.params,
            &pos,
            Some(&mut counter),
        )?;
        let mut hook = ConfidenceHalting::new(&self.params, cfg.arch, cfg.halt);
        if let Some(o) = overrides {
            hook = hook.with_overrides(o);
        }
        let stages = run_stages(
            &tokens,
            &cfg.arch,
            &cfg.plan,
            &self.params,
            &mut hook,
            cfg.mode,
            &mut counter,
        )?;

        let n0 = tokens.len();
        let predictions = assemble_predictions(&stages.records, n0)?;
        let (cell_labels, _) = broadcast_labels(&partition, &predictions.labels)?;
        let pixel_labels = full_size_labels(
            &cell_labels,
            image.width(),
            image.height(),
            grid.crop_offset(),
        );
        let halt_map = halt_stage_map(&predictions.stages, partition.patches(), gh, gw);
        let prune = pruned_fraction(&stages.records, cfg.plan.len());

        let survivors: Vec<usize> = stages
            .trace
            .iter()
            .map(|t| t.alive_count - t.halted_ids.len())
            .collect();
        let schedule = HaltSchedule::from_counts(n0, &survivors)?;
        let cost =
            pipeline_cost_in_mode(n0, grid.cells(), &cfg.arch, &cfg.plan, &schedule, cfg.mode)?;
        if cost.total_flops != counter.flops() {
            return Err(PipelineError::Invariant(format!(
                "analytical {} FLOPs, counted {}",
                cost.total_flops,
                counter.flops()
            )));
        }
        Ok(Segmentation {
            crop_offset: grid.crop_offset(),
            partition,
            stages,
            predictions,
            cell_labels,
            pixel_labels,
            halt_map,
            prune,
            cost,
            macs: counter.total(),
        })
    }
}

/// Expands patch-resolution labels to a `width` x `height` map whose grid
/// starts at `offset`, clamping pixels outside the grid to the border cells.
pub fn full_size_labels(
    cells: &LabelMap,
    width: usize,
    height: usize,
    offset: (usize, usize),
) -> LabelMap {
    let (gw, gh) = (cells.width(), cells.height());
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let cy = (y.saturating_sub(offset.1) / PATCH_PX).min(gh - 1);
        for x in 0..width {
            let cx = (x.saturating_sub(offset.0) / PATCH_PX).min(gw - 1);
            out.push(cells.get(cx, cy));
        }
    }
    LabelMap::new(width, height, out).expect("dimensions consistent")
}

/// Copy of `image` with superpatch boundaries drawn as 1 px white lines.
pub fn render_partition(
    image: &Image,
    partition: &SuperpatchPartition,
    offset: (usize, usize),
) -> Image {
    let mut out = image.to_rgb();
    let white = [255u8; 3];
    let (ox, oy) = offset;
    for sp in partition.patches() {
        let (x0, y0) = (ox + sp.col * PATCH_PX, oy + sp.row * PATCH_PX);
        let side = sp.size * PATCH_PX;
        for i in 0..side {
            out.set_pixel(x0 + i, y0, &white);
            out.set_pixel(x0, y0 + i, &white);
        }
    }
    let (w, h) = (partition.grid_w() * PATCH_PX, partition.grid_h() * PATCH_PX);
    for i in 0..w {
        out.set_pixel(ox + i, oy + h - 1, &white);
    }
    for i in 0..h {
        out.set_pixel(ox + w - 1, oy + i, &white);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Superpatch;
    use crate::merge::{MergeMode, MergeThresholds, ScoreSource};

    fn tiny(plan: &[usize], tau: f64, mode: ExecMode) -> PipelineConfig {
        let arch = ArchConfig {
            layers: 3,
            dim: 16,
            heads: 2,
            mlp_ratio: 4,
            num_classes: 4,
        };
        PipelineConfig {
            arch,
            merge: MergeConfig {
                mode: MergeMode::Dynamic(MergeThresholds::T4999),
                source: ScoreSource::default(),
            },
            halt: HaltConfig::new(tau).unwrap(),
            plan: StagePlan::new(plan.to_vec(), 3).unwrap(),
            mode,
            seed: 11,
        }
    }

    fn two_tone() -> Image {
        let mut img = Image::filled(70, 64, &[20, 40, 60]).unwrap();
        for y in 0..64 {
            for x in 35..70 {
                img.set_pixel(x, y, &[200, 10, 90]);
            }
        }
        img
    }

    #[test]
    fn runs_and_cost_matches() {
        let s = Segmenter::new(tiny(&[1, 2], 0.3, ExecMode::Compact)).unwrap();
        let out = s.segment(&two_tone(), None).unwrap();
        assert_eq!(out.crop_offset, (3, 0));
        assert_eq!(out.pixel_labels.width(), 70);
        assert_eq!(out.cost.total_flops, 2 * out.macs);
        assert_eq!(out.predictions.labels.len(), out.partition.len());
    }

    #[test]
    fn modes_give_same_labels() {
        let img = two_tone();
        let a = Segmenter::new(tiny(&[1], 0.3, ExecMode::Masked))
            .unwrap()
            .segment(&img, None)
            .unwrap();
        let b = Segmenter::new(tiny(&[1], 0.3, ExecMode::Compact))
            .unwrap()
            .segment(&img, None)
            .unwrap();
        assert_eq!(a.pixel_labels, b.pixel_labels);
        assert_eq!(a.halt_map, b.halt_map);
        assert!(a.macs >= b.macs);
    }

    #[test]
    fn labels_clamp_to_border_cells() {
        let cells = LabelMap::new(2, 1, vec![3, 7]).unwrap();
        let px = full_size_labels(&cells, 36, 17, (2, 0));
        assert_eq!(px.get(0, 0), 3);
        assert_eq!(px.get(17, 16), 3);
        assert_eq!(px.get(18, 0), 7);
        assert_eq!(px.get(35, 16), 7);
    }

    #[test]
    fn boundaries_are_single_pixel() {
        let img = Image::filled(32, 32, &[0, 0, 0]).unwrap();
        let p = SuperpatchPartition::from_patches(
            2,
            2,
            vec![
                Superpatch::new(0, 0, 1),
                Superpatch::new(0, 1, 1),
                Superpatch::new(1, 0, 1),
                Superpatch::new(1, 1, 1),
            ],
        );
        let r = render_partition(&img, &p, (0, 0));
        let white = |x, y| r.pixel(x, y) == [255, 255, 255];
        assert!(white(0, 5) && white(16, 5) && white(31, 5) && white(5, 31));
        assert!(!white(15, 5) && !white(17, 5) && !white(5, 5));
    }
}
