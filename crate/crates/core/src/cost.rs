//! Analytical FLOPs model of the pipeline.
//!
//! Only matrix products are counted, as 2 FLOPs per multiply-accumulate;
//! layer norm, softmax, GELU and residual additions are left out. The
//! instrumented kernels count the same products, so for any executed run
//! the analytical total equals `2 * MacCounter::total()` exactly.
//!
//! Per layer over `n` tokens of width `d` with MLP ratio `r`:
//!
//! ```text
//! qkv 3nd²  scores n²d  weighted sum n²d  out nd²  mlp 2r·nd²
//! ```
//!
//! so with `r = 4` a layer costs `24nd² + 4n²d` FLOPs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{ArchConfig, ExecMode, ModelError, StagePlan};
use crate::grid::{SuperpatchPartition, SUPERPATCH_SIZES};
use crate::supertoken::PATCH_INPUT_DIM;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("schedule has {found} fractions, plan has {expected} heads")]
    ScheduleLength { expected: usize, found: usize },
    #[error("schedule fractions must be non-increasing and in (0,1], got {0:?}")]
    ScheduleValues(Vec<f64>),
    #[error("token counts must be non-increasing and at most {n0}, got {counts:?}")]
    ScheduleCounts { n0: usize, counts: Vec<usize> },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CostError>;

pub fn layer_macs(n: u64, d: u64, mlp_ratio: u64) -> u64 {
    (4 + 2 * mlp_ratio) * n * d * d + 2 * n * n * d
}

/// FLOPs of one encoder layer with MLP ratio 4.
pub fn layer_flops(n: u64, d: u64) -> u64 {
    2 * layer_macs(n, d, 4)
}

pub fn head_flops(n: u64, d: u64, num_classes: u64) -> u64 {
    2 * n * d * num_classes
}

pub fn embed_flops(n: u64, d: u64) -> u64 {
    2 * n * PATCH_INPUT_DIM as u64 * d
}

/// Surviving-token fraction after each aux head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HaltSchedule {
    survivors: Vec<f64>,
}

impl HaltSchedule {
    pub fn new(survivors: Vec<f64>) -> Result<Self> {
        let ok = survivors.iter().all(|&f| f > 0.0 && f <= 1.0)
            && survivors.windows(2).all(|w| w[1] <= w[0]);
        if ok {
            Ok(Self { survivors })
        } else {
            Err(CostError::ScheduleValues(survivors))
        }
    }

    /// Nothing halts at any of `heads` heads.
    pub fn no_pruning(heads: usize) -> Self {
        Self {
            survivors: vec![1.0; heads],
        }
    }

    /// Fractions from observed survivor counts out of `n0`. Zero survivors
    /// are allowed here, since a measured run can halt everything.
    pub fn from_counts(n0: usize, counts: &[usize]) -> Result<Self> {
        let ok =
            n0 > 0 && counts.iter().all(|&c| c <= n0) && counts.windows(2).all(|w| w[1] <= w[0]);
        if !ok {
            return Err(CostError::ScheduleCounts {
                n0,
                counts: counts.to_vec(),
            });
        }
        Ok(Self {
            survivors: counts.iter().map(|&c| c as f64 / n0 as f64).collect(),
        })
    }

    pub fn fractions(&self) -> &[f64] {
        &self.survivors
    }

    pub fn len(&self) -> usize {
        self.survivors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.survivors.is_empty()
    }

    /// Token count in force after each head, rounded to nearest.
    pub fn counts(&self, n0: usize) -> Vec<usize> {
        self.survivors
            .iter()
            .map(|&f| (n0 as f64 * f).round() as usize)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub tokens: usize,
    pub baseline_tokens: usize,
    pub embed_flops: u64,
    pub layer_tokens: Vec<usize>,
    pub layer_flops: Vec<u64>,
    pub aux_head_tokens: Vec<usize>,
    pub aux_head_flops: Vec<u64>,
    pub final_head_tokens: usize,
    pub final_head_flops: u64,
    /// Merge-scorer cost; a configurable constant, zero unless set.
    pub scorer_flops: u64,
    pub encoder_flops: u64,
    pub total_flops: u64,
    pub baseline_encoder_flops: u64,
    pub baseline_total_flops: u64,
    /// Baseline total over this total.
    pub reduction_factor: f64,
    /// 1 - encoder / baseline encoder.
    pub encoder_reduction: f64,
    /// Baseline tokens over tokens.
    pub token_reduction: f64,
}

impl CostReport {
    pub fn with_scorer_flops(mut self, flops: u64) -> Self {
        self.total_flops = self.total_flops - self.scorer_flops + flops;
        self.scorer_flops = flops;
        self.reduction_factor = self.baseline_total_flops as f64 / self.total_flops as f64;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }
}

struct Tally {
    layer_tokens: Vec<usize>,
    layer_flops: Vec<u64>,
    aux_tokens: Vec<usize>,
    aux_flops: Vec<u64>,
    final_tokens: usize,
    final_flops: u64,
    embed: u64,
}

impl Tally {
    fn encoder(&self) -> u64 {
        self.layer_flops.iter().sum()
    }

    fn total(&self) -> u64 {
        self.embed + self.encoder() + self.aux_flops.iter().sum::<u64>() + self.final_flops
    }
}

fn tally(
    n0: usize,
    arch: &ArchConfig,
    plan: &StagePlan,
    counts: &[usize],
    mode: ExecMode,
) -> Tally {
    let (d, c, r) = (
        arch.dim as u64,
        arch.num_classes as u64,
        arch.mlp_ratio as u64,
    );
    let mut alive = n0;
    let mut t = Tally {
        layer_tokens: Vec::with_capacity(arch.layers),
        layer_flops: Vec::with_capacity(arch.layers),
        aux_tokens: Vec::with_capacity(plan.len()),
        aux_flops: Vec::with_capacity(plan.len()),
        final_tokens: 0,
        final_flops: 0,
        embed: embed_flops(n0 as u64, d),
    };
    for layer in 0..arch.layers {
        let rows = match mode {
            _ if alive == 0 => 0,
            ExecMode::Masked => n0,
            ExecMode::Compact => alive,
        };
        t.layer_tokens.push(alive);
        t.layer_flops.push(2 * layer_macs(rows as u64, d, r));
        if let Some(k) = plan.head_after(layer) {
            t.aux_tokens.push(alive);
            t.aux_flops.push(head_flops(alive as u64, d, c));
            alive = counts[k];
        }
    }
    t.final_tokens = alive;
    t.final_flops = head_flops(alive as u64, d, c);
    t
}

/// Cost of a compact-mode run over `n0` supertokens, against a baseline of
/// `baseline_tokens` unmerged tokens with no aux heads.
pub fn pipeline_cost(
    n0: usize,
    baseline_tokens: usize,
    arch: &ArchConfig,
    plan: &StagePlan,
    schedule: &HaltSchedule,
) -> Result<CostReport> {
    pipeline_cost_in_mode(n0, baseline_tokens, arch, plan, schedule, ExecMode::Compact)
}

/// As [`pipeline_cost`]; masked mode runs every layer over all `n0` rows
/// while any token is alive.
pub fn pipeline_cost_in_mode(
    n0: usize,
    baseline_tokens: usize,
    arch: &ArchConfig,
    plan: &StagePlan,
    schedule: &HaltSchedule,
    mode: ExecMode,
) -> Result<CostReport> {
    arch.validate()?;
    plan.validate(arch.layers)?;
    if schedule.len() != plan.len() {
        return Err(CostError::ScheduleLength {
            expected: plan.len(),
            found: schedule.len(),
        });
    }
    let counts = schedule.counts(n0);
    let t = tally(n0, arch, plan, &counts, mode);
    let base = tally(
        baseline_tokens,
        arch,
        &StagePlan::empty(),
        &[],
        ExecMode::Compact,
    );
    let (encoder, total) = (t.encoder(), t.total());
    let (base_encoder, base_total) = (base.encoder(), base.total());
    Ok(CostReport {
        tokens: n0,
        baseline_tokens,
        embed_flops: t.embed,
        layer_tokens: t.layer_tokens,
        layer_flops: t.layer_flops,
        aux_head_tokens: t.aux_tokens,
        aux_head_flops: t.aux_flops,
        final_head_tokens: t.final_tokens,
        final_head_flops: t.final_flops,
        scorer_flops: 0,
        encoder_flops: encoder,
        total_flops: total,
        baseline_encoder_flops: base_encoder,
        baseline_total_flops: base_total,
        reduction_factor: ratio(base_total, total),
        encoder_reduction: if base_encoder == 0 {
            0.0
        } else {
            1.0 - encoder as f64 / base_encoder as f64
        },
        token_reduction: ratio(baseline_tokens as u64, n0 as u64),
    })
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Hypothetical survivor fraction for a head placed after a given layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleModel {
    /// Survivors fall linearly with depth, from 1 at the input to
    /// `terminal` after the last layer.
    LinearDepth { terminal: f64 },
    /// Every head leaves the same fraction alive, independent of depth.
    Constant { fraction: f64 },
}

impl Default for ScheduleModel {
    fn default() -> Self {
        ScheduleModel::LinearDepth { terminal: 0.6 }
    }
}

impl ScheduleModel {
    pub fn survivors_at(&self, position: usize, layers: usize) -> f64 {
        match *self {
            ScheduleModel::LinearDepth { terminal } => {
                1.0 - (1.0 - terminal) * position as f64 / layers as f64
            }
            ScheduleModel::Constant { fraction } => fraction,
        }
    }

    pub fn schedule(&self, plan: &StagePlan, layers: usize) -> Result<HaltSchedule> {
        let mut fractions: Vec<f64> = plan
            .positions()
            .iter()
            .map(|&p| self.survivors_at(p, layers))
            .collect();
        // Survivors of a later head are a subset of an earlier head's.
        for i in 1..fractions.len() {
            fractions[i] = fractions[i].min(fractions[i - 1]);
        }
        HaltSchedule::new(fractions)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub plan: StagePlan,
    pub survivors: Vec<f64>,
    pub total_flops: u64,
    pub encoder_flops: u64,
    /// Relative to the empty plan on the same tokens.
    pub flops_fraction: f64,
}

/// Every plan with zero, one or two heads, sorted by total FLOPs (ties by
/// head positions).
pub fn sweep_head_placements(
    arch: &ArchConfig,
    n0: usize,
    model: &ScheduleModel,
) -> Result<Vec<SweepRow>> {
    let mut plans = vec![StagePlan::empty()];
    for p in 1..arch.layers {
        plans.push(StagePlan::new(vec![p], arch.layers)?);
        for q in p + 1..arch.layers {
            plans.push(StagePlan::new(vec![p, q], arch.layers)?);
        }
    }
    let base = pipeline_cost(
        n0,
        n0,
        arch,
        &StagePlan::empty(),
        &HaltSchedule::no_pruning(0),
    )?;
    let mut rows = plans
        .into_iter()
        .map(|plan| {
            let schedule = model.schedule(&plan, arch.layers)?;
            let report = pipeline_cost(n0, n0, arch, &plan, &schedule)?;
            Ok(SweepRow {
                survivors: schedule.fractions().to_vec(),
                total_flops: report.total_flops,
                encoder_flops: report.encoder_flops,
                flops_fraction: ratio(report.total_flops, base.total_flops),
                plan,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        a.total_flops
            .cmp(&b.total_flops)
            .then_with(|| a.plan.positions().cmp(b.plan.positions()))
    });
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut out = format!(
        "{:<10} {:<16} {:>20} {:>10}\n",
        "plan", "survivors", "flops", "fraction"
    );
    for r in rows {
        let plan = if r.plan.is_empty() {
            "-".to_string()
        } else {
            format!("[{}]", r.plan.label())
        };
        let surv = r
            .survivors
            .iter()
            .map(|f| format!("{f:.3}"))
            .collect::<Vec<_>>()
            .join(",");
        let surv = if surv.is_empty() {
            "-".to_string()
        } else {
            surv
        };
        let _ = writeln!(
            out,
            "{plan:<10} {surv:<16} {:>20} {:>10.4}",
            r.total_flops, r.flops_fraction
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountStats {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

impl CountStats {
    fn of(values: impl Iterator<Item = usize> + Clone) -> Self {
        let n = values.clone().count();
        let sum: usize = values.clone().sum();
        Self {
            mean: sum as f64 / n as f64,
            min: values.clone().min().unwrap_or(0),
            max: values.max().unwrap_or(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub size: usize,
    #[serde(flatten)]
    pub count: CountStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionStats {
    pub images: usize,
    pub by_size: Vec<SizeStats>,
    pub tokens: CountStats,
    pub mean_reduction_factor: f64,
}

/// Superpatch counts per size, aggregated over a corpus.
pub fn partition_stats(partitions: &[SuperpatchPartition]) -> Result<PartitionStats> {
    if partitions.is_empty() {
        return Err(CostError::EmptyCorpus);
    }
    let counts: Vec<[usize; 5]> = partitions.iter().map(|p| p.counts_by_size()).collect();
    let by_size = SUPERPATCH_SIZES
        .iter()
        .enumerate()
        .map(|(i, &size)| SizeStats {
            size,
            count: CountStats::of(counts.iter().map(move |c| c[i])),
        })
        .collect();
    let reduction: f64 = partitions
        .iter()
        .map(|p| p.cells() as f64 / p.len() as f64)
        .sum();
    Ok(PartitionStats {
        images: partitions.len(),
        by_size,
        tokens: CountStats::of(partitions.iter().map(SuperpatchPartition::len)),
        mean_reduction_factor: reduction / partitions.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Superpatch;

    fn plan(p: &[usize], layers: usize) -> StagePlan {
        StagePlan::new(p.to_vec(), layers).unwrap()
    }

    #[test]
    fn closed_form() {
        assert_eq!(layer_flops(4, 8), 24 * 4 * 64 + 4 * 16 * 8);
        assert_eq!(layer_flops(1, 64), 24 * 64 * 64 + 4 * 64);
        let (a, b) = (layer_flops(4, 4096) as f64, layer_flops(8, 4096) as f64);
        assert!((b / a - 2.0).abs() < 0.05 * 2.0);
    }

    #[test]
    fn plain_vit_baseline() {
        let arch = ArchConfig::vit_base(10);
        let r = pipeline_cost(
            100,
            100,
            &arch,
            &StagePlan::empty(),
            &HaltSchedule::no_pruning(0),
        )
        .unwrap();
        let expect = embed_flops(100, 768) + 12 * layer_flops(100, 768) + head_flops(100, 768, 10);
        assert_eq!(r.total_flops, expect);
        assert_eq!(r.total_flops, r.baseline_total_flops);
        assert_eq!(r.reduction_factor, 1.0);
    }

    #[test]
    fn schedule_in_force() {
        let arch = ArchConfig {
            layers: 4,
            dim: 8,
            heads: 2,
            mlp_ratio: 4,
            num_classes: 3,
        };
        let s = HaltSchedule::from_counts(10, &[6, 2]).unwrap();
        let r = pipeline_cost(10, 40, &arch, &plan(&[1, 3], 4), &s).unwrap();
        assert_eq!(r.layer_tokens, vec![10, 6, 6, 2]);
        assert_eq!(r.aux_head_tokens, vec![10, 6]);
        assert_eq!(r.final_head_tokens, 2);
        let parts = r.embed_flops
            + r.encoder_flops
            + r.aux_head_flops.iter().sum::<u64>()
            + r.final_head_flops;
        assert_eq!(parts, r.total_flops);
        assert_eq!(r.token_reduction, 4.0);

        let m =
            pipeline_cost_in_mode(10, 40, &arch, &plan(&[1, 3], 4), &s, ExecMode::Masked).unwrap();
        assert_eq!(m.layer_flops, vec![layer_flops(10, 8); 4]);
        assert_eq!(m.aux_head_flops, r.aux_head_flops);
    }

    #[test]
    fn schedule_validation() {
        assert!(HaltSchedule::new(vec![0.8, 0.9]).is_err());
        assert!(HaltSchedule::new(vec![0.0]).is_err());
        assert!(HaltSchedule::from_counts(5, &[6]).is_err());
        let arch = ArchConfig::vit_base(10);
        let bad = pipeline_cost(
            10,
            10,
            &arch,
            &plan(&[6, 8], 12),
            &HaltSchedule::no_pruning(1),
        );
        assert!(matches!(bad, Err(CostError::ScheduleLength { .. })));
    }

    #[test]
    fn two_head_encoder_fraction() {
        // Linear terms alone give (8 + 8*0.8 + 8*0.6)/24 = 0.8; the quadratic
        // term shrinks faster, so the fraction lands a little below.
        let arch = ArchConfig::vit_large(150);
        let s = HaltSchedule::new(vec![0.8, 0.6]).unwrap();
        let r = pipeline_cost(1024, 1024, &arch, &plan(&[8, 16], 24), &s).unwrap();
        let (n, d) = (1024u64, 1024u64);
        let lin = |k: u64| 24 * k * d * d;
        let quad = |k: u64| 4 * k * k * d;
        let (n1, n2) = (
            (n as f64 * 0.8).round() as u64,
            (n as f64 * 0.6).round() as u64,
        );
        let enc = 8 * (lin(n) + quad(n)) + 8 * (lin(n1) + quad(n1)) + 8 * (lin(n2) + quad(n2));
        assert_eq!(r.encoder_flops, enc);
        assert!(
            (r.encoder_reduction - 0.20).abs() <= 0.03,
            "{}",
            r.encoder_reduction
        );
    }

    #[test]
    fn sweep_orderings() {
        let arch = ArchConfig::vit_large(150);
        let rows = sweep_head_placements(&arch, 1024, &ScheduleModel::default()).unwrap();
        assert_eq!(rows.len(), 1 + 23 + 23 * 22 / 2);
        let find = |p: &[usize]| {
            rows.iter()
                .find(|r| r.plan.positions() == p)
                .unwrap()
                .total_flops
        };
        assert!(find(&[8, 16]) < find(&[18]));
        assert!(find(&[18]) < find(&[]));
        assert!(rows
            .windows(2)
            .all(|w| w[0].total_flops <= w[1].total_flops));

        let fixed = ScheduleModel::Constant { fraction: 0.7 };
        let rows = sweep_head_placements(&arch, 1024, &fixed).unwrap();
        let find = |p: &[usize]| {
            rows.iter()
                .find(|r| r.plan.positions() == p)
                .unwrap()
                .total_flops
        };
        for p in 1..23 {
            assert!(find(&[p]) < find(&[p + 1]));
        }
        let empty = rows.iter().find(|r| r.plan.is_empty()).unwrap();
        assert_eq!(empty.flops_fraction, 1.0);
        let table = sweep_table(&rows[..3]);
        assert_eq!(table.lines().count(), 4);
    }

    #[test]
    fn corpus_stats() {
        let constant = SuperpatchPartition::from_patches(
            32,
            32,
            vec![
                Superpatch::new(0, 0, 16),
                Superpatch::new(0, 16, 16),
                Superpatch::new(16, 0, 16),
                Superpatch::new(16, 16, 16),
            ],
        );
        let s = partition_stats(std::slice::from_ref(&constant)).unwrap();
        let counts: Vec<_> = s
            .by_size
            .iter()
            .map(|b| (b.size, b.count.min, b.count.max))
            .collect();
        assert_eq!(
            counts,
            vec![(1, 0, 0), (2, 0, 0), (4, 0, 0), (8, 0, 0), (16, 4, 4)]
        );
        assert_eq!(s.mean_reduction_factor, 256.0);

        let s = partition_stats(&[SuperpatchPartition::uniform(32, 32), constant]).unwrap();
        assert_eq!(s.by_size[0].count.mean, 512.0);
        assert_eq!((s.tokens.min, s.tokens.max), (4, 1024));
        assert!(matches!(partition_stats(&[]), Err(CostError::EmptyCorpus)));
    }
}
