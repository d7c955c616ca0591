//! Pre-norm ViT encoder split into stages by auxiliary heads.
//!
//! Two execution modes produce identical survivor embeddings:
//!
//! * [`ExecMode::Masked`] keeps all N tokens in place. Dead tokens are
//!   excluded as attention keys through an additive `-inf` mask and their
//!   rows are left untouched (frozen), but every matrix product still runs
//!   over all N rows.
//! * [`ExecMode::Compact`] physically gathers the surviving rows, so each
//!   layer costs only what the survivors need.
//!
//! Both modes accumulate every dot product in the same order, and masked
//! keys contribute exact zeros, so results agree bit for bit in practice.
//! Masked mode is the reference; compact mode is the fast path.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::early_exit::{head_param_specs, run_head, HaltRecord, HaltStage, HeadId};
use crate::params::{init_params, Init, ParamError, ParamSpec, ParamStore};
use crate::supertoken::{embed_param_specs, TokenSet};
use crate::tensor::{
    gelu, layer_norm, matmul, matmul_transposed, softmax_rows_inplace, MacCounter, Matrix,
    TensorError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("halting hook returned token {0}, which is not alive")]
    InvalidHalt(usize),
    #[error("confidence override: {0}")]
    Override(String),
    #[error("halt records: {0}")]
    Records(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl ArchConfig {
    /// 12 layers, width 768, 12 heads.
    pub fn vit_base(num_classes: usize) -> Self {
        Self {
            layers: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            num_classes,
        }
    }

    /// 24 layers, width 1024, 16 heads.
    pub fn vit_large(num_classes: usize) -> Self {
        Self {
            layers: 24,
            dim: 1024,
            heads: 16,
            mlp_ratio: 4,
            num_classes,
        }
    }

    pub fn preset(name: &str, num_classes: usize) -> Option<Self> {
        match name {
            "vit-base" | "vit_base" => Some(Self::vit_base(num_classes)),
            "vit-large" | "vit_large" => Some(Self::vit_large(num_classes)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim < 2 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(ModelError::Config(format!(
                "degenerate architecture {self:?}"
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(1..=256).contains(&self.num_classes) {
            return Err(ModelError::Config(format!(
                "num_classes {} outside 1..=256",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Layers after which an auxiliary head runs (1-based, strictly increasing,
/// each below the layer count).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StagePlan {
    head_positions: Vec<usize>,
}

impl StagePlan {
    pub fn new(head_positions: Vec<usize>, layers: usize) -> Result<Self> {
        let plan = Self { head_positions };
        plan.validate(layers)?;
        Ok(plan)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let ok = self.head_positions.iter().all(|&p| p >= 1 && p < layers)
            && self.head_positions.windows(2).all(|w| w[0] < w[1]);
        if ok {
            Ok(())
        } else {
            Err(ModelError::Config(format!(
                "head positions {:?} invalid for {layers} layers",
                self.head_positions
            )))
        }
    }

    pub fn positions(&self) -> &[usize] {
        &self.head_positions
    }

    pub fn len(&self) -> usize {
        self.head_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.head_positions.is_empty()
    }

    /// Aux head index that runs right after 0-based layer `layer`, if any.
    pub fn head_after(&self, layer: usize) -> Option<usize> {
        self.head_positions.iter().position(|&p| p == layer + 1)
    }

    /// `"8,16"` style label.
    pub fn label(&self) -> String {
        self.head_positions
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Masked,
    #[default]
    Compact,
}

fn layer_name(layer: usize, part: &str) -> String {
    format!("layers.{layer}.{part}")
}

/// Parameter layout for the whole model: patch embedding, encoder layers,
/// `num_aux_heads` auxiliary heads and the final head.
pub fn model_param_specs(arch: &ArchConfig, num_aux_heads: usize) -> Vec<ParamSpec> {
    let (d, hidden) = (arch.dim, arch.dim * arch.mlp_ratio);
    let mut specs = embed_param_specs(d);
    for l in 0..arch.layers {
        let mut push = |part: &str, rows, cols, init| {
            specs.push(ParamSpec::new(layer_name(l, part), rows, cols, init))
        };
        push("norm1.gain", 1, d, Init::Ones);
        push("norm1.bias", 1, d, Init::Zeros);
        push("attn.qkv.weight", d, 3 * d, Init::TruncatedNormal);
        push("attn.qkv.bias", 1, 3 * d, Init::Zeros);
        push("attn.out.weight", d, d, Init::TruncatedNormal);
        push("attn.out.bias", 1, d, Init::Zeros);
        push("norm2.gain", 1, d, Init::Ones);
        push("norm2.bias", 1, d, Init::Zeros);
        push("mlp.fc1.weight", d, hidden, Init::TruncatedNormal);
        push("mlp.fc1.bias", 1, hidden, Init::Zeros);
        push("mlp.fc2.weight", hidden, d, Init::TruncatedNormal);
        push("mlp.fc2.bias", 1, d, Init::Zeros);
    }
    for k in 0..num_aux_heads {
        specs.extend(head_param_specs(HeadId::Aux(k), d, arch.num_classes));
    }
    specs.extend(head_param_specs(HeadId::Final, d, arch.num_classes));
    specs
}

/// Seeded model parameters. Each tensor has its own stream, so adding aux
/// heads leaves every other tensor unchanged.
pub fn init_model(arch: &ArchConfig, num_aux_heads: usize, seed: u64) -> Result<ParamStore> {
    arch.validate()?;
    Ok(init_params(&model_param_specs(arch, num_aux_heads), seed))
}

struct LayerParams<'a> {
    norm1: (&'a [f32], &'a [f32]),
    qkv: (&'a Matrix, &'a [f32]),
    out: (&'a Matrix, &'a [f32]),
    norm2: (&'a [f32], &'a [f32]),
    fc1: (&'a Matrix, &'a [f32]),
    fc2: (&'a Matrix, &'a [f32]),
}

impl<'a> LayerParams<'a> {
    fn load(store: &'a ParamStore, arch: &ArchConfig, l: usize) -> Result<Self> {
        let (d, hidden) = (arch.dim, arch.dim * arch.mlp_ratio);
        let m = |part: &str, r, c| store.expect(&layer_name(l, part), r, c);
        let v = |part: &str, c| Ok::<_, ModelError>(m(part, 1, c)?.data());
        Ok(Self {
            norm1: (v("norm1.gain", d)?, v("norm1.bias", d)?),
            qkv: (m("attn.qkv.weight", d, 3 * d)?, v("attn.qkv.bias", 3 * d)?),
            out: (m("attn.out.weight", d, d)?, v("attn.out.bias", d)?),
            norm2: (v("norm2.gain", d)?, v("norm2.bias", d)?),
            fc1: (m("mlp.fc1.weight", d, hidden)?, v("mlp.fc1.bias", hidden)?),
            fc2: (m("mlp.fc2.weight", hidden, d)?, v("mlp.fc2.bias", d)?),
        })
    }
}

fn linear(x: &Matrix, (w, b): (&Matrix, &[f32]), counter: &mut MacCounter) -> Result<Matrix> {
    let mut y = matmul(x, w, Some(counter))?;
    y.add_row_vector(b)?;
    Ok(y)
}

/// One pre-norm block over every row of `x`. With `key_alive`, dead tokens
/// are masked out as keys and their rows are returned unchanged.
fn block_forward(
    x: &Matrix,
    key_alive: Option<&[bool]>,
    p: &LayerParams<'_>,
    arch: &ArchConfig,
    counter: &mut MacCounter,
) -> Result<Matrix> {
    let (d, hd) = (arch.dim, arch.head_dim());
    let h = layer_norm(x, p.norm1.0, p.norm1.1)?;
    let qkv = linear(&h, p.qkv, counter)?;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut ctx = Matrix::zeros(x.rows(), d);
    for head in 0..arch.heads {
        let q = qkv.column_block(head * hd, hd);
        let k = qkv.column_block(d + head * hd, hd);
        let v = qkv.column_block(2 * d + head * hd, hd);
        let mut scores = matmul_transposed(&q, &k, Some(counter))?;
        scores.scale(scale);
        if let Some(alive) = key_alive {
            for r in 0..scores.rows() {
                for (s, &a) in scores.row_mut(r).iter_mut().zip(alive) {
                    if !a {
                        *s = f32::NEG_INFINITY;
                    }
                }
            }
        }
        softmax_rows_inplace(&mut scores);
        ctx.set_column_block(head * hd, &matmul(&scores, &v, Some(counter))?);
    }
    let mut x1 = linear(&ctx, p.out, counter)?;
    x1.add_assign(x)?;

    let h2 = layer_norm(&x1, p.norm2.0, p.norm2.1)?;
    let mut f = linear(&h2, p.fc1, counter)?;
    f.map_inplace(gelu);
    let mut out = linear(&f, p.fc2, counter)?;
    out.add_assign(&x1)?;

    if let Some(alive) = key_alive {
        for (r, &a) in alive.iter().enumerate() {
            if !a {
                out.row_mut(r).copy_from_slice(x.row(r));
            }
        }
    }
    Ok(out)
}

fn alive_ids(alive: &[bool]) -> Vec<usize> {
    alive
        .iter()
        .enumerate()
        .filter_map(|(i, &a)| a.then_some(i))
        .collect()
}

/// One encoder layer (0-based `layer`) over an N x d token matrix. Dead rows
/// come back unchanged in both modes. With no alive token the layer is a
/// no-op and costs nothing.
pub fn encoder_block(
    tokens: &Matrix,
    alive: &[bool],
    params: &ParamStore,
    arch: &ArchConfig,
    layer: usize,
    mode: ExecMode,
    counter: &mut MacCounter,
) -> Result<Matrix> {
    if tokens.cols() != arch.dim || alive.len() != tokens.rows() {
        return Err(TensorError::DimensionMismatch {
            op: "encoder_block",
            left: tokens.shape(),
            right: (alive.len(), arch.dim),
        }
        .into());
    }
    if !alive.iter().any(|&a| a) {
        return Ok(tokens.clone());
    }
    let p = LayerParams::load(params, arch, layer)?;
    match mode {
        ExecMode::Masked => block_forward(tokens, Some(alive), &p, arch, counter),
        ExecMode::Compact => {
            let ids = alive_ids(alive);
            let y = block_forward(&tokens.gather_rows(&ids), None, &p, arch, counter)?;
            let mut out = tokens.clone();
            out.scatter_rows(&ids, &y);
            Ok(out)
        }
    }
}

/// Callback invoked after each layer listed in the [`StagePlan`].
pub trait HaltHook {
    /// `tokens` holds the alive rows, in token-id order given by `ids`.
    /// Returns records for the tokens to halt; each must be in `ids`.
    fn at_head(
        &mut self,
        head: usize,
        tokens: &Matrix,
        ids: &[usize],
        counter: &mut MacCounter,
    ) -> Result<Vec<HaltRecord>>;

    /// Whether [`HaltHook::after_layer`] should receive survivor snapshots.
    fn observes_layers(&self) -> bool {
        false
    }

    fn after_layer(&mut self, _layer: usize, _ids: &[usize], _survivors: &Matrix) {}
}

/// Hook that never halts anything.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoHalting;

impl HaltHook for NoHalting {
    fn at_head(
        &mut self,
        _: usize,
        _: &Matrix,
        _: &[usize],
        _: &mut MacCounter,
    ) -> Result<Vec<HaltRecord>> {
        Ok(Vec::new())
    }
}

/// One auxiliary-head event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: usize,
    /// 1-based layer the head follows.
    pub layer: usize,
    /// Tokens alive when the head ran.
    pub alive_count: usize,
    pub halted_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    /// N x d; halted rows hold their embedding at halt time.
    pub tokens: Matrix,
    /// One record per token, sorted by token id.
    pub records: Vec<HaltRecord>,
    pub trace: Vec<StageTrace>,
    /// Alive tokens entering each layer.
    pub layer_tokens: Vec<usize>,
    /// Tokens classified by the final head.
    pub final_tokens: usize,
}

impl StageOutput {
    pub fn trace_jsonl(&self) -> String {
        self.trace
            .iter()
            .map(|t| serde_json::to_string(t).expect("plain struct") + "\n")
            .collect()
    }
}

/// Runs every layer, consults `hook` after each planned head, and classifies
/// the remaining tokens with the final head.
pub fn run_stages(
    tokens: &TokenSet,
    arch: &ArchConfig,
    plan: &StagePlan,
    params: &ParamStore,
    hook: &mut dyn HaltHook,
    mode: ExecMode,
    counter: &mut MacCounter,
) -> Result<StageOutput> {
    arch.validate()?;
    plan.validate(arch.layers)?;
    let n = tokens.len();
    if tokens.dim() != arch.dim {
        return Err(ModelError::Config(format!(
            "tokens have width {}, architecture expects {}",
            tokens.dim(),
            arch.dim
        )));
    }

    let mut alive = tokens.alive.clone();
    let mut ids = alive_ids(&alive);
    // Masked mode works on `full`; compact mode on `compact`, with `full`
    // receiving rows as they halt.
    let mut full = tokens.embeddings.clone();
    let mut compact = full.gather_rows(&ids);
    let mut records: Vec<HaltRecord> = Vec::with_capacity(n);
    let mut trace = Vec::with_capacity(plan.len());
    let mut layer_tokens = Vec::with_capacity(arch.layers);

    for layer in 0..arch.layers {
        layer_tokens.push(ids.len());
        if !ids.is_empty() {
            let p = LayerParams::load(params, arch, layer)?;
            match mode {
                ExecMode::Masked => full = block_forward(&full, Some(&alive), &p, arch, counter)?,
                ExecMode::Compact => compact = block_forward(&compact, None, &p, arch, counter)?,
            }
        }
        if mode == ExecMode::Masked {
            compact = full.gather_rows(&ids);
        }
        if hook.observes_layers() {
            hook.after_layer(layer, &ids, &compact);
        }

        let Some(head) = plan.head_after(layer) else {
            continue;
        };
        let halted = if ids.is_empty() {
            Vec::new()
        } else {
            hook.at_head(head, &compact, &ids, counter)?
        };
        let mut halted_ids: Vec<usize> = halted.iter().map(|r| r.token_id).collect();
        halted_ids.sort_unstable();
        for w in halted_ids.windows(2) {
            if w[0] == w[1] {
                return Err(ModelError::InvalidHalt(w[0]));
            }
        }
        for &id in &halted_ids {
            if !alive.get(id).copied().unwrap_or(false) {
                return Err(ModelError::InvalidHalt(id));
            }
            alive[id] = false;
        }
        trace.push(StageTrace {
            stage: head,
            layer: layer + 1,
            alive_count: ids.len(),
            halted_ids,
        });
        records.extend(halted);
        if mode == ExecMode::Compact {
            full.scatter_rows(&ids, &compact);
        }
        ids = alive_ids(&alive);
        compact = full.gather_rows(&ids);
    }

    if mode == ExecMode::Compact {
        full.scatter_rows(&ids, &compact);
    }
    if !ids.is_empty() {
        let probs = run_head(&compact, params, HeadId::Final, arch, counter)?;
        for (k, &id) in ids.iter().enumerate() {
            records.push(HaltRecord {
                token_id: id,
                stage: HaltStage::Final,
                class_probs: probs.row(k).to_vec(),
            });
        }
    }
    records.sort_by_key(|r| r.token_id);
    Ok(StageOutput {
        tokens: full,
        records,
        trace,
        layer_tokens,
        final_tokens: ids.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Superpatch;
    use crate::rng::SeededRng;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            layers: 3,
            dim: 8,
            heads: 2,
            mlp_ratio: 4,
            num_classes: 3,
        }
    }

    fn random_tokens(n: usize, d: usize, seed: u64) -> TokenSet {
        let mut rng = SeededRng::new(seed);
        let data = (0..n * d).map(|_| rng.standard_normal() as f32).collect();
        TokenSet {
            embeddings: Matrix::new(n, d, data).unwrap(),
            origins: (0..n).map(|i| Superpatch::new(0, i, 1)).collect(),
            alive: vec![true; n],
            grid_h: 1,
            grid_w: n,
        }
    }

    /// Sharpens the attention of a parameter store so that tests are not
    /// dominated by near-uniform softmax.
    fn params(arch: &ArchConfig, heads: usize, seed: u64) -> ParamStore {
        let mut p = init_model(arch, heads, seed).unwrap();
        for l in 0..arch.layers {
            p.get_mut(&layer_name(l, "attn.qkv.weight"))
                .unwrap()
                .scale(40.0);
        }
        p
    }

    #[test]
    fn presets() {
        let b = ArchConfig::vit_base(150);
        assert_eq!((b.layers, b.dim, b.heads), (12, 768, 12));
        let l = ArchConfig::vit_large(150);
        assert_eq!((l.layers, l.dim, l.heads), (24, 1024, 16));
        assert!(ArchConfig {
            dim: 10,
            heads: 3,
            ..tiny_arch()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn plan_validation() {
        assert!(StagePlan::new(vec![8, 16], 24).is_ok());
        assert!(StagePlan::new(vec![18], 24).is_ok());
        assert!(StagePlan::new(vec![6, 8], 12).is_ok());
        assert!(StagePlan::new(vec![16, 8], 24).is_err());
        assert!(StagePlan::new(vec![24], 24).is_err());
        assert!(StagePlan::new(vec![0], 24).is_err());
        assert_eq!(StagePlan::new(vec![8, 16], 24).unwrap().label(), "8,16");
    }

    #[test]
    fn modes_coincide_when_all_alive() {
        let arch = tiny_arch();
        let p = params(&arch, 0, 1);
        let t = random_tokens(7, 8, 2);
        let alive = vec![true; 7];
        let (mut c1, mut c2) = (MacCounter::new(), MacCounter::new());
        let a = encoder_block(
            &t.embeddings,
            &alive,
            &p,
            &arch,
            0,
            ExecMode::Masked,
            &mut c1,
        )
        .unwrap();
        let b = encoder_block(
            &t.embeddings,
            &alive,
            &p,
            &arch,
            0,
            ExecMode::Compact,
            &mut c2,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(c1, c2);
    }

    #[test]
    fn block_mac_count_matches_closed_form() {
        let arch = tiny_arch();
        let p = params(&arch, 0, 1);
        let t = random_tokens(5, 8, 2);
        let mut c = MacCounter::new();
        encoder_block(
            &t.embeddings,
            &[true; 5],
            &p,
            &arch,
            1,
            ExecMode::Compact,
            &mut c,
        )
        .unwrap();
        let (n, d) = (5u64, 8u64);
        assert_eq!(c.total(), 12 * n * d * d + 2 * n * n * d);
    }

    #[test]
    fn single_alive_token_attends_to_itself() {
        // One key: softmax is exactly 1, so the attention context equals the
        // token's own value projection. Check through the block by
        // comparing against a direct evaluation with an identity-free path.
        let arch = ArchConfig {
            layers: 1,
            ..tiny_arch()
        };
        let p = params(&arch, 0, 3);
        let t = random_tokens(1, 8, 4);
        let lp = LayerParams::load(&p, &arch, 0).unwrap();
        let mut c = MacCounter::new();
        let h = layer_norm(&t.embeddings, lp.norm1.0, lp.norm1.1).unwrap();
        let qkv = linear(&h, lp.qkv, &mut c).unwrap();
        let v = qkv.column_block(16, 8);
        let mut x1 = linear(&v, lp.out, &mut c).unwrap();
        x1.add_assign(&t.embeddings).unwrap();
        let h2 = layer_norm(&x1, lp.norm2.0, lp.norm2.1).unwrap();
        let mut f = linear(&h2, lp.fc1, &mut c).unwrap();
        f.map_inplace(gelu);
        let mut expect = linear(&f, lp.fc2, &mut c).unwrap();
        expect.add_assign(&x1).unwrap();
        let got = encoder_block(
            &t.embeddings,
            &[true],
            &p,
            &arch,
            0,
            ExecMode::Compact,
            &mut c,
        )
        .unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn dead_tokens_are_frozen_and_modes_agree() {
        let arch = tiny_arch();
        let p = params(&arch, 0, 5);
        let t = random_tokens(6, 8, 6);
        let alive = [true, false, true, true, false, true];
        let (mut c1, mut c2) = (MacCounter::new(), MacCounter::new());
        let m = encoder_block(
            &t.embeddings,
            &alive,
            &p,
            &arch,
            2,
            ExecMode::Masked,
            &mut c1,
        )
        .unwrap();
        let c = encoder_block(
            &t.embeddings,
            &alive,
            &p,
            &arch,
            2,
            ExecMode::Compact,
            &mut c2,
        )
        .unwrap();
        for (r, &a) in alive.iter().enumerate() {
            if a {
                for (x, y) in m.row(r).iter().zip(c.row(r)) {
                    assert!((x - y).abs() <= 1e-5 * y.abs().max(1.0));
                }
            } else {
                assert_eq!(m.row(r), t.embeddings.row(r));
                assert_eq!(c.row(r), t.embeddings.row(r));
            }
        }
        // Masked mode pays for all six rows, compact for four.
        assert!(c1.total() > c2.total());
    }

    #[test]
    fn empty_plan_with_no_halting_runs_all_layers() {
        let arch = tiny_arch();
        let p = params(&arch, 2, 7);
        let t = random_tokens(5, 8, 8);
        let mut c = MacCounter::new();
        let out = run_stages(
            &t,
            &arch,
            &StagePlan::empty(),
            &p,
            &mut NoHalting,
            ExecMode::Compact,
            &mut c,
        )
        .unwrap();
        assert_eq!(out.records.len(), 5);
        assert!(out.records.iter().all(|r| r.stage == HaltStage::Final));
        assert_eq!(out.layer_tokens, vec![5, 5, 5]);

        let plan = StagePlan::new(vec![1, 2], 3).unwrap();
        let mut c2 = MacCounter::new();
        let out2 = run_stages(
            &t,
            &arch,
            &plan,
            &p,
            &mut NoHalting,
            ExecMode::Compact,
            &mut c2,
        )
        .unwrap();
        assert_eq!(out.tokens, out2.tokens);
        assert_eq!(out.records, out2.records);
        assert_eq!(out2.trace.len(), 2);
    }

    #[test]
    fn rejects_bogus_halts() {
        struct Bad;
        impl HaltHook for Bad {
            fn at_head(
                &mut self,
                _: usize,
                _: &Matrix,
                _: &[usize],
                _: &mut MacCounter,
            ) -> Result<Vec<HaltRecord>> {
                Ok(vec![HaltRecord {
                    token_id: 99,
                    stage: HaltStage::Aux(0),
                    class_probs: vec![1.0],
                }])
            }
        }
        let arch = tiny_arch();
        let p = params(&arch, 1, 1);
        let t = random_tokens(3, 8, 1);
        let plan = StagePlan::new(vec![1], 3).unwrap();
        let r = run_stages(
            &t,
            &arch,
            &plan,
            &p,
            &mut Bad,
            ExecMode::Compact,
            &mut MacCounter::new(),
        );
        assert!(matches!(r, Err(ModelError::InvalidHalt(99))));
    }
}
