//! Flat JSON run configuration. Precedence, lowest first: built-in
//! defaults, `--config` file, command-line flags, `STEP_SEED`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use step_core::early_exit::{ConfidenceOverride, HaltConfig};
use step_core::encoder::{ArchConfig, ExecMode, StagePlan};
use step_core::merge::{
    HomogeneityScorer, MergeConfig, MergeMode, MergeThresholds, ScoreMap, ScoreSource,
};
use step_core::pipeline::PipelineConfig;

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "STEP_SEED";

pub const DEFAULT_ARCH: &str = "vit-base";
pub const DEFAULT_PRESET: &str = "t4999";
pub const DEFAULT_NUM_CLASSES: usize = 8;
pub const DEFAULT_TAU_HALT: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MergeKind {
    Dynamic,
    Topk,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Option<String>,
    pub layers: Option<usize>,
    pub dim: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub num_classes: Option<usize>,
    pub merge: Option<MergeKind>,
    pub preset: Option<String>,
    pub tau_2: Option<f64>,
    pub tau_4: Option<f64>,
    pub tau_8: Option<f64>,
    pub tau_16: Option<f64>,
    pub top_k: Option<usize>,
    pub homogeneity_k: Option<f64>,
    pub scores: Option<PathBuf>,
    pub tau_halt: Option<f64>,
    #[serde(deserialize_with = "plan_field")]
    pub plan: Option<Vec<usize>>,
    pub mode: Option<ExecMode>,
    pub seed: Option<u64>,
    pub confidence_override: Option<PathBuf>,
    pub scorer_flops: Option<u64>,
}

/// Accepts `[8, 16]` or `"8,16"`.
fn plan_field<'de, D: Deserializer<'de>>(
    d: D,
) -> std::result::Result<Option<Vec<usize>>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Plan {
        List(Vec<usize>),
        Text(String),
    }
    match Option::<Plan>::deserialize(d)? {
        None => Ok(None),
        Some(Plan::List(v)) => Ok(Some(v)),
        Some(Plan::Text(s)) => parse_plan(&s).map(Some).map_err(serde::de::Error::custom),
    }
}

pub fn parse_plan(text: &str) -> std::result::Result<Vec<usize>, String> {
    let text = text.trim().trim_start_matches('[').trim_end_matches(']');
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| format!("plan entry {p:?}: {e}"))
        })
        .collect()
}

macro_rules! overlay_fields {
    ($dst:expr, $src:expr, $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f; } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    /// Fields set in `top` replace ours.
    pub fn overlay(mut self, top: RunConfig) -> Self {
        overlay_fields!(
            self,
            top,
            arch,
            layers,
            dim,
            heads,
            mlp_ratio,
            num_classes,
            merge,
            preset,
            tau_2,
            tau_4,
            tau_8,
            tau_16,
            top_k,
            homogeneity_k,
            scores,
            tau_halt,
            plan,
            mode,
            seed,
            confidence_override,
            scorer_flops
        );
        self
    }

    /// Applies `STEP_SEED` if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("{SEED_ENV}={v:?}: {e}")))?;
            self.seed = Some(seed);
        }
        Ok(self)
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let arch_name = self
            .arch
            .clone()
            .unwrap_or_else(|| DEFAULT_ARCH.to_string());
        let num_classes = self.num_classes.unwrap_or(DEFAULT_NUM_CLASSES);
        let mut arch = ArchConfig::preset(&arch_name, num_classes)
            .ok_or_else(|| CliError::Usage(format!("unknown arch {arch_name:?}")))?;
        arch.layers = self.layers.unwrap_or(arch.layers);
        arch.dim = self.dim.unwrap_or(arch.dim);
        arch.heads = self.heads.unwrap_or(arch.heads);
        arch.mlp_ratio = self.mlp_ratio.unwrap_or(arch.mlp_ratio);
        arch.validate()?;

        let preset = self
            .preset
            .clone()
            .unwrap_or_else(|| DEFAULT_PRESET.to_string());
        let base = MergeThresholds::preset(&preset)
            .ok_or_else(|| CliError::Usage(format!("unknown threshold preset {preset:?}")))?;
        let thresholds = MergeThresholds::new(
            self.tau_2.unwrap_or(base.tau_2),
            self.tau_4.unwrap_or(base.tau_4),
            self.tau_8.unwrap_or(base.tau_8),
            self.tau_16.unwrap_or(base.tau_16),
        )?;
        let merge_kind = self.merge.unwrap_or(MergeKind::Dynamic);
        let mode = match merge_kind {
            MergeKind::Dynamic => MergeMode::Dynamic(thresholds),
            MergeKind::Topk => MergeMode::TopK(
                self.top_k
                    .ok_or_else(|| CliError::Usage("merge=topk needs top_k".into()))?,
            ),
        };
        let k = self
            .homogeneity_k
            .unwrap_or(step_core::merge::DEFAULT_HOMOGENEITY_K);
        let source = match &self.scores {
            Some(path) => ScoreSource::File(ScoreMap::load(path)?),
            None => ScoreSource::Homogeneity(HomogeneityScorer::new(k)?),
        };

        let plan_positions = self.plan.clone().unwrap_or_default();
        let plan = StagePlan::new(plan_positions.clone(), arch.layers)?;
        let tau_halt = self.tau_halt.unwrap_or(DEFAULT_TAU_HALT);
        let halt = HaltConfig::new(tau_halt)?;
        let exec = self.mode.unwrap_or_default();
        let seed = self.seed.unwrap_or(0);
        let overrides = self
            .confidence_override
            .as_deref()
            .map(ConfidenceOverride::load)
            .transpose()?;

        let effective = RunConfig {
            arch: Some(arch_name),
            layers: Some(arch.layers),
            dim: Some(arch.dim),
            heads: Some(arch.heads),
            mlp_ratio: Some(arch.mlp_ratio),
            num_classes: Some(num_classes),
            merge: Some(merge_kind),
            preset: Some(preset),
            tau_2: Some(thresholds.tau_2),
            tau_4: Some(thresholds.tau_4),
            tau_8: Some(thresholds.tau_8),
            tau_16: Some(thresholds.tau_16),
            top_k: self.top_k,
            homogeneity_k: self.scores.is_none().then_some(k),
            scores: self.scores.clone(),
            tau_halt: Some(tau_halt),
            plan: Some(plan_positions),
            mode: Some(exec),
            seed: Some(seed),
            confidence_override: self.confidence_override.clone(),
            scorer_flops: Some(self.scorer_flops.unwrap_or(0)),
        };
        Ok(Resolved {
            pipeline: PipelineConfig {
                arch,
                merge: MergeConfig { mode, source },
                halt,
                plan,
                mode: exec,
                seed,
            },
            overrides,
            scorer_flops: self.scorer_flops.unwrap_or(0),
            effective,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct") + "\n"
    }
}

#[derive(Clone, Debug)]
pub struct Resolved {
    pub pipeline: PipelineConfig,
    pub overrides: Option<ConfidenceOverride>,
    pub scorer_flops: u64,
    /// Fully populated config, echoed into output directories.
    pub effective: RunConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_forms() {
        let a: RunConfig = serde_json::from_str(r#"{"plan": "8,16"}"#).unwrap();
        let b: RunConfig = serde_json::from_str(r#"{"plan": [8, 16]}"#).unwrap();
        assert_eq!(a.plan, Some(vec![8, 16]));
        assert_eq!(a, b);
        assert_eq!(parse_plan("").unwrap(), Vec::<usize>::new());
        assert_eq!(parse_plan("[18]").unwrap(), vec![18]);
        assert!(parse_plan("8,x").is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn defaults_and_overlay() {
        let r = RunConfig::default().resolve().unwrap();
        assert_eq!(r.pipeline.arch, ArchConfig::vit_base(DEFAULT_NUM_CLASSES));
        assert_eq!(
            r.pipeline.merge.mode,
            MergeMode::Dynamic(MergeThresholds::T4999)
        );
        assert!(r.pipeline.plan.is_empty());

        let file = RunConfig {
            arch: Some("vit-large".into()),
            preset: Some("t6899".into()),
            seed: Some(3),
            ..Default::default()
        };
        let flags = RunConfig {
            plan: Some(vec![8, 16]),
            seed: Some(9),
            tau_2: Some(0.5),
            ..Default::default()
        };
        let r = file.overlay(flags).resolve().unwrap();
        assert_eq!(r.pipeline.arch.layers, 24);
        assert_eq!(r.pipeline.seed, 9);
        assert_eq!(
            r.pipeline.merge.mode,
            MergeMode::Dynamic(MergeThresholds {
                tau_2: 0.5,
                ..MergeThresholds::T6899
            })
        );
        assert_eq!(r.effective.resolve().unwrap().effective, r.effective);
    }

    #[test]
    fn usage_errors() {
        let bad = |c: RunConfig| matches!(c.resolve(), Err(CliError::Usage(_)));
        assert!(bad(RunConfig {
            arch: Some("vit-huge".into()),
            ..Default::default()
        }));
        assert!(bad(RunConfig {
            preset: Some("t1".into()),
            ..Default::default()
        }));
        assert!(bad(RunConfig {
            plan: Some(vec![12]),
            ..Default::default()
        }));
        assert!(bad(RunConfig {
            tau_halt: Some(1.5),
            ..Default::default()
        }));
        assert!(bad(RunConfig {
            merge: Some(MergeKind::Topk),
            ..Default::default()
        }));
        let missing = RunConfig {
            scores: Some("/nonexistent.json".into()),
            ..Default::default()
        };
        assert!(matches!(missing.resolve(), Err(CliError::Input(_))));
    }
}
