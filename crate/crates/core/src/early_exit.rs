//! Auxiliary heads, confidence-based halting and prediction assembly.
//!
//! A token halts at a head when its confidence `c` (maximum class
//! probability unless overridden) satisfies `c >= tau_halt`. Its class
//! probabilities at that moment are final; later heads never see it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::encoder::{ArchConfig, HaltHook, ModelError, Result};
use crate::grid::Superpatch;
use crate::params::{Init, ParamSpec, ParamStore};
use crate::pixel_io::LabelMap;
use crate::tensor::{layer_norm, matmul, softmax_rows_inplace, MacCounter, Matrix};

/// Gray value of tokens classified by the final head in halt-stage maps.
pub const FINAL_STAGE_GRAY: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaltConfig {
    pub tau_halt: f64,
}

impl HaltConfig {
    pub fn new(tau_halt: f64) -> Result<Self> {
        let c = Self { tau_halt };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.tau_halt) {
            Ok(())
        } else {
            Err(ModelError::Config(format!(
                "tau_halt {} outside [0,1]",
                self.tau_halt
            )))
        }
    }
}

impl Default for HaltConfig {
    fn default() -> Self {
        Self { tau_halt: 0.95 }
    }
}

/// Where a token left the encoder: aux head `k` (0-based) or the final head.
/// Serialized as the head index or the string `"final"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HaltStage {
    Aux(usize),
    Final,
}

impl HaltStage {
    fn param_prefix(self) -> String {
        match self {
            HaltStage::Aux(k) => format!("aux.{k}"),
            HaltStage::Final => "final_head".to_string(),
        }
    }

    pub fn gray(self) -> u8 {
        match self {
            HaltStage::Aux(k) => k.min(254) as u8,
            HaltStage::Final => FINAL_STAGE_GRAY,
        }
    }
}

/// Heads and halt stages share one naming scheme.
pub type HeadId = HaltStage;

impl Serialize for HaltStage {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            HaltStage::Aux(k) => s.serialize_u64(*k as u64),
            HaltStage::Final => s.serialize_str("final"),
        }
    }
}

impl<'de> Deserialize<'de> for HaltStage {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct StageVisitor;
        impl Visitor<'_> for StageVisitor {
            type Value = HaltStage;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a head index or \"final\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<HaltStage, E> {
                Ok(HaltStage::Aux(v as usize))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<HaltStage, E> {
                match v {
                    "final" => Ok(HaltStage::Final),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(StageVisitor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaltRecord {
    pub token_id: usize,
    pub stage: HaltStage,
    pub class_probs: Vec<f32>,
}

pub fn head_param_specs(head: HeadId, d: usize, num_classes: usize) -> Vec<ParamSpec> {
    let p = head.param_prefix();
    vec![
        ParamSpec::new(format!("{p}.norm.gain"), 1, d, Init::Ones),
        ParamSpec::new(format!("{p}.norm.bias"), 1, d, Init::Zeros),
        ParamSpec::new(
            format!("{p}.proj.weight"),
            d,
            num_classes,
            Init::TruncatedNormal,
        ),
        ParamSpec::new(format!("{p}.proj.bias"), 1, num_classes, Init::Zeros),
    ]
}

/// Layer norm, linear map to class logits, row softmax. Counts N·d·C MACs.
pub fn run_head(
    tokens: &Matrix,
    params: &ParamStore,
    head: HeadId,
    arch: &ArchConfig,
    counter: &mut MacCounter,
) -> Result<Matrix> {
    let (d, c) = (arch.dim, arch.num_classes);
    let p = head.param_prefix();
    let gain = params.expect(&format!("{p}.norm.gain"), 1, d)?;
    let bias = params.expect(&format!("{p}.norm.bias"), 1, d)?;
    let w = params.expect(&format!("{p}.proj.weight"), d, c)?;
    let b = params.expect(&format!("{p}.proj.bias"), 1, c)?;
    let h = layer_norm(tokens, gain.data(), bias.data())?;
    let mut logits = matmul(&h, w, Some(counter))?;
    logits.add_row_vector(b.data())?;
    softmax_rows_inplace(&mut logits);
    Ok(logits)
}

/// Auxiliary head `k`.
pub fn aux_head(
    tokens: &Matrix,
    params: &ParamStore,
    k: usize,
    arch: &ArchConfig,
    counter: &mut MacCounter,
) -> Result<Matrix> {
    run_head(tokens, params, HaltStage::Aux(k), arch, counter)
}

/// Maximum class probability.
pub fn confidence(probs: &[f32]) -> f32 {
    probs.iter().copied().fold(f32::NEG_INFINITY, f32::max)
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(probs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

pub fn halts(confidence: f64, tau_halt: f64) -> bool {
    confidence >= tau_halt
}

/// Model confidences are f32, so the threshold is rounded to f32 before
/// comparing; a probability of `0.95f32` halts at `tau_halt = 0.95`.
fn model_confidences(
    probs: &Matrix,
    rows: impl Iterator<Item = Option<usize>>,
    tau_halt: f64,
) -> (Vec<f64>, f64) {
    let tau = f64::from(tau_halt as f32);
    let conf = rows
        .map(|r| r.map_or(f64::NEG_INFINITY, |r| f64::from(confidence(probs.row(r)))))
        .collect();
    (conf, tau)
}

/// Positions in `confidences` whose token halts.
pub fn select_halts(confidences: &[f64], tau_halt: f64) -> Vec<usize> {
    confidences
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| halts(c, tau_halt).then_some(i))
        .collect()
}

/// Applies the halting rule to full-length `probs` (one row per token).
/// Dead tokens are ignored. Records carry `stage`.
pub fn halt_step(
    probs: &Matrix,
    alive: &[bool],
    tau_halt: f64,
    stage: HaltStage,
) -> (Vec<bool>, Vec<HaltRecord>) {
    let rows = (0..probs.rows()).map(|r| alive[r].then_some(r));
    let (conf, tau) = model_confidences(probs, rows, tau_halt);
    let mut new_alive = alive.to_vec();
    let mut records = Vec::new();
    for i in select_halts(&conf, tau) {
        new_alive[i] = false;
        records.push(HaltRecord {
            token_id: i,
            stage,
            class_probs: probs.row(i).to_vec(),
        });
    }
    (new_alive, records)
}

/// Scripted confidences: aux head index to one value per token id. Heads
/// without an entry fall back to the model's confidence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfidenceOverride {
    stages: BTreeMap<usize, Vec<f64>>,
}

impl ConfidenceOverride {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, stage: usize, confidences: Vec<f64>) -> Result<()> {
        if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(ModelError::Override(format!(
                "stage {stage}: confidence {c} outside [0,1]"
            )));
        }
        self.stages.insert(stage, confidences);
        Ok(())
    }

    pub fn stage(&self, stage: usize) -> Option<&[f64]> {
        self.stages.get(&stage).map(Vec::as_slice)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<usize, Vec<f64>> =
            serde_json::from_str(text).map_err(|e| ModelError::Override(e.to_string()))?;
        let mut o = Self::new();
        for (stage, c) in raw {
            o.insert(stage, c)?;
        }
        Ok(o)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Override(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.stages).expect("plain map")
    }
}

/// Survivor rows observed after one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSnapshot {
    pub layer: usize,
    pub ids: Vec<usize>,
    pub survivors: Matrix,
}

/// Halting hook that runs the aux heads and applies the confidence rule.
pub struct ConfidenceHalting<'a> {
    params: &'a ParamStore,
    arch: ArchConfig,
    config: HaltConfig,
    overrides: Option<&'a ConfidenceOverride>,
    record_layers: bool,
    snapshots: Vec<LayerSnapshot>,
}

impl<'a> ConfidenceHalting<'a> {
    pub fn new(params: &'a ParamStore, arch: ArchConfig, config: HaltConfig) -> Self {
        Self {
            params,
            arch,
            config,
            overrides: None,
            record_layers: false,
            snapshots: Vec::new(),
        }
    }

    pub fn with_overrides(mut self, overrides: &'a ConfidenceOverride) -> Self {
        self.overrides = Some(overrides);
        self
    }

    pub fn recording_layers(mut self) -> Self {
        self.record_layers = true;
        self
    }

    pub fn snapshots(&self) -> &[LayerSnapshot] {
        &self.snapshots
    }

    pub fn into_snapshots(self) -> Vec<LayerSnapshot> {
        self.snapshots
    }
}

impl HaltHook for ConfidenceHalting<'_> {
    fn at_head(
        &mut self,
        head: usize,
        tokens: &Matrix,
        ids: &[usize],
        counter: &mut MacCounter,
    ) -> Result<Vec<HaltRecord>> {
        let probs = aux_head(tokens, self.params, head, &self.arch, counter)?;
        let (conf, tau): (Vec<f64>, f64) = match self.overrides.and_then(|o| o.stage(head)) {
            Some(script) => (
                ids.iter()
                    .map(|&id| {
                        script.get(id).copied().ok_or_else(|| {
                            ModelError::Override(format!(
                                "stage {head} has {} entries, token {id} needs one",
                                script.len()
                            ))
                        })
                    })
                    .collect::<Result<_>>()?,
                self.config.tau_halt,
            ),
            None => model_confidences(&probs, (0..probs.rows()).map(Some), self.config.tau_halt),
        };
        Ok(select_halts(&conf, tau)
            .into_iter()
            .map(|k| HaltRecord {
                token_id: ids[k],
                stage: HaltStage::Aux(head),
                class_probs: probs.row(k).to_vec(),
            })
            .collect())
    }

    fn observes_layers(&self) -> bool {
        self.record_layers
    }

    fn after_layer(&mut self, layer: usize, ids: &[usize], survivors: &Matrix) {
        self.snapshots.push(LayerSnapshot {
            layer,
            ids: ids.to_vec(),
            survivors: survivors.clone(),
        });
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Predictions {
    pub labels: Vec<u8>,
    pub stages: Vec<HaltStage>,
}

/// Per-token labels and exit stages from exactly one record per token.
pub fn assemble_predictions(records: &[HaltRecord], n: usize) -> Result<Predictions> {
    let mut slots: Vec<Option<&HaltRecord>> = vec![None; n];
    for r in records {
        let slot = slots
            .get_mut(r.token_id)
            .ok_or_else(|| ModelError::Records(format!("token {} out of range {n}", r.token_id)))?;
        if slot.replace(r).is_some() {
            return Err(ModelError::Records(format!(
                "duplicate record for token {}",
                r.token_id
            )));
        }
    }
    let mut labels = Vec::with_capacity(n);
    let mut stages = Vec::with_capacity(n);
    for (i, slot) in slots.into_iter().enumerate() {
        let r = slot.ok_or_else(|| ModelError::Records(format!("no record for token {i}")))?;
        if r.class_probs.is_empty() || r.class_probs.len() > 256 {
            return Err(ModelError::Records(format!(
                "token {i} has {} class probabilities",
                r.class_probs.len()
            )));
        }
        labels.push(argmax(&r.class_probs) as u8);
        stages.push(r.stage);
    }
    Ok(Predictions { labels, stages })
}

/// Halted-token statistics per aux head, against the initial token count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneStats {
    pub total_tokens: usize,
    /// Tokens that halted at this head or an earlier one.
    pub cumulative: Vec<usize>,
    /// Tokens that halted exactly at this head.
    pub incremental: Vec<usize>,
    pub cumulative_fraction: Vec<f64>,
    pub incremental_fraction: Vec<f64>,
}

pub fn pruned_fraction(records: &[HaltRecord], num_heads: usize) -> PruneStats {
    let mut incremental = vec![0usize; num_heads];
    for r in records {
        if let HaltStage::Aux(k) = r.stage {
            if k < num_heads {
                incremental[k] += 1;
            }
        }
    }
    let cumulative: Vec<usize> = incremental
        .iter()
        .scan(0, |acc, &c| {
            *acc += c;
            Some(*acc)
        })
        .collect();
    let n = records.len();
    let frac = |v: &[usize]| -> Vec<f64> {
        v.iter()
            .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect()
    };
    PruneStats {
        total_tokens: n,
        cumulative_fraction: frac(&cumulative),
        incremental_fraction: frac(&incremental),
        cumulative,
        incremental,
    }
}

/// Patch-resolution map of where each cell's token exited: the aux head
/// index as gray value, [`FINAL_STAGE_GRAY`] for the final head.
pub fn halt_stage_map(
    stages: &[HaltStage],
    origins: &[Superpatch],
    grid_h: usize,
    grid_w: usize,
) -> LabelMap {
    let mut map = LabelMap::zeros(grid_w, grid_h);
    for (sp, stage) in origins.iter().zip(stages) {
        for (r, c) in sp.cells() {
            map.set(c, r, stage.gray());
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_model;

    fn arch(c: usize) -> ArchConfig {
        ArchConfig {
            layers: 2,
            dim: 4,
            heads: 1,
            mlp_ratio: 1,
            num_classes: c,
        }
    }

    #[test]
    fn zero_head_is_uniform() {
        let a = arch(5);
        let mut p = init_model(&a, 1, 0).unwrap();
        p.get_mut("aux.0.proj.weight").unwrap().scale(0.0);
        let x = Matrix::new(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]).unwrap();
        let mut c = MacCounter::new();
        let probs = aux_head(&x, &p, 0, &a, &mut c).unwrap();
        assert!(probs.data().iter().all(|&v| v == 0.2));
        assert_eq!(c.total(), 2 * 4 * 5);
    }

    #[test]
    fn hand_softmax_two_classes() {
        // Bias [2, 0] with zero weights gives logits [2, 0].
        let a = arch(2);
        let mut p = init_model(&a, 1, 0).unwrap();
        p.get_mut("aux.0.proj.weight").unwrap().scale(0.0);
        p.get_mut("aux.0.proj.bias").unwrap().set(0, 0, 2.0);
        let x = Matrix::new(1, 4, vec![0.3, -0.1, 0.7, 0.2]).unwrap();
        let probs = aux_head(&x, &p, 0, &a, &mut MacCounter::new()).unwrap();
        let e2 = 2f64.exp();
        assert!((probs.get(0, 0) as f64 - e2 / (e2 + 1.0)).abs() < 1e-6);
        assert!((probs.get(0, 1) as f64 - 1.0 / (e2 + 1.0)).abs() < 1e-6);
    }

    fn probs_with_max(maxes: &[f32]) -> Matrix {
        Matrix::from_rows(&maxes.iter().map(|&m| vec![m, 1.0 - m]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn boundary_halts() {
        let conf = [0.99, 0.50, 0.96, 0.95, 0.10];
        assert_eq!(select_halts(&conf, 0.95), vec![0, 2, 3]);
        let probs = probs_with_max(&[0.99, 0.50, 0.96, 0.95, 0.10]);
        let (alive, recs) = halt_step(&probs, &[true; 5], 0.95, HaltStage::Aux(0));
        assert_eq!(alive, vec![false, true, false, false, true]);
        assert_eq!(
            recs.iter().map(|r| r.token_id).collect::<Vec<_>>(),
            vec![0, 2, 3]
        );
    }

    #[test]
    fn extreme_thresholds() {
        let probs = probs_with_max(&[0.9, 0.6, 0.999]);
        assert!(halt_step(&probs, &[true; 3], 1.0, HaltStage::Aux(0))
            .1
            .is_empty());
        assert_eq!(
            halt_step(&probs, &[true; 3], 0.0, HaltStage::Aux(0))
                .1
                .len(),
            3
        );
        let (alive, recs) = halt_step(&probs, &[false, true, true], 0.0, HaltStage::Aux(1));
        assert_eq!(alive, vec![false; 3]);
        assert_eq!(recs.len(), 2);
    }

    #[test]
    fn assembly_rules() {
        let rec = |id, stage, probs: Vec<f32>| HaltRecord {
            token_id: id,
            stage,
            class_probs: probs,
        };
        let mut peak = vec![0.0; 8];
        peak[5] = 1.0;
        let records = vec![
            rec(
                1,
                HaltStage::Final,
                vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            ),
            rec(0, HaltStage::Aux(0), peak),
        ];
        let p = assemble_predictions(&records, 2).unwrap();
        assert_eq!(p.labels, vec![5, 0]);
        assert_eq!(p.stages, vec![HaltStage::Aux(0), HaltStage::Final]);
        assert!(assemble_predictions(&records, 3).is_err());
        let dup = vec![records[0].clone(), records[0].clone()];
        assert!(assemble_predictions(&dup, 2).is_err());
    }

    #[test]
    fn prune_arithmetic() {
        let rec = |id, stage| HaltRecord {
            token_id: id,
            stage,
            class_probs: vec![1.0],
        };
        let none: Vec<_> = (0..5).map(|i| rec(i, HaltStage::Final)).collect();
        let s = pruned_fraction(&none, 2);
        assert_eq!(s.cumulative, vec![0, 0]);
        assert_eq!(s.cumulative_fraction, vec![0.0, 0.0]);

        let some = vec![
            rec(0, HaltStage::Aux(0)),
            rec(1, HaltStage::Final),
            rec(2, HaltStage::Aux(0)),
            rec(3, HaltStage::Aux(1)),
            rec(4, HaltStage::Final),
        ];
        let s = pruned_fraction(&some, 2);
        assert_eq!(s.cumulative, vec![2, 3]);
        assert_eq!(s.incremental, vec![2, 1]);
        assert_eq!(s.cumulative_fraction, vec![0.4, 0.6]);
        assert_eq!(s.incremental_fraction, vec![0.4, 0.2]);
    }

    #[test]
    fn stage_serde() {
        let s = serde_json::to_string(&[HaltStage::Aux(1), HaltStage::Final]).unwrap();
        assert_eq!(s, r#"[1,"final"]"#);
        let back: Vec<HaltStage> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vec![HaltStage::Aux(1), HaltStage::Final]);
        assert!(serde_json::from_str::<HaltStage>(r#""aux""#).is_err());
    }

    #[test]
    fn override_parsing() {
        let o = ConfidenceOverride::from_json(r#"{"0": [0.1, 1.0], "2": [0.5]}"#).unwrap();
        assert_eq!(o.stage(0), Some(&[0.1, 1.0][..]));
        assert_eq!(o.stage(1), None);
        assert!(ConfidenceOverride::from_json(r#"{"0": [1.5]}"#).is_err());
        assert_eq!(ConfidenceOverride::from_json(&o.to_json()).unwrap(), o);
    }

    #[test]
    fn stage_map_paints_cells() {
        let origins = [
            Superpatch::new(0, 0, 2),
            Superpatch::new(0, 2, 1),
            Superpatch::new(1, 2, 1),
        ];
        let origins: Vec<_> = origins
            .into_iter()
            .chain([Superpatch::new(0, 3, 1), Superpatch::new(1, 3, 1)])
            .collect();
        let stages = [
            HaltStage::Aux(0),
            HaltStage::Final,
            HaltStage::Aux(1),
            HaltStage::Final,
            HaltStage::Final,
        ];
        let m = halt_stage_map(&stages, &origins, 2, 4);
        assert_eq!(m.labels(), &[0, 0, 255, 255, 0, 0, 1, 255]);
    }
}
