//! Superpatches to supertokens: bilinear resize to one base patch, linear
//! patch embedding, and positional-embedding pooling over covered cells.

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{extract_pixels, GridError, Superpatch, SuperpatchPartition, PATCH_PX};
use crate::params::{init_params, Init, ParamError, ParamSpec, ParamStore};
use crate::pixel_io::{Image, LabelMap};
use crate::tensor::{matmul, MacCounter, Matrix, TensorError};

/// Flattened length of one RGB base patch.
pub const PATCH_INPUT_DIM: usize = PATCH_PX * PATCH_PX * 3;

pub const EMBED_WEIGHT: &str = "patch_embed.weight";
pub const EMBED_BIAS: &str = "patch_embed.bias";

#[derive(Debug, Error)]
pub enum SupertokenError {
    #[error("resize input must be square, got {width}x{height}")]
    NonSquare { width: usize, height: usize },
    #[error("resize input side {0} is not one of 16, 32, 64, 128, 256")]
    UnsupportedSide(usize),
    #[error("embedding expects a 3-channel image, got {0} channels")]
    Channels(usize),
    #[error("{labels} labels for {tokens} tokens")]
    LabelCount { labels: usize, tokens: usize },
    #[error("positional table is {table:?}, partition grid is {grid:?}")]
    PosTableShape {
        table: (usize, usize),
        grid: (usize, usize),
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

pub type Result<T> = std::result::Result<T, SupertokenError>;

/// Bilinear resize of a square block to 16x16 (half-pixel centers, edge
/// clamping, round half to even).
pub fn resize_bilinear(block: &Image) -> Result<Image> {
    let (w, h) = (block.width(), block.height());
    if w != h {
        return Err(SupertokenError::NonSquare {
            width: w,
            height: h,
        });
    }
    if ![16, 32, 64, 128, 256].contains(&w) {
        return Err(SupertokenError::UnsupportedSide(w));
    }
    if w == PATCH_PX {
        return Ok(block.clone());
    }
    let ch = block.channels();
    let scale = w as f64 / PATCH_PX as f64;
    let taps: Vec<(usize, usize, f64)> = (0..PATCH_PX)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(w - 1);
            let hi = (lo + 1).min(w - 1);
            (lo, hi, src - lo as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(PATCH_PX * PATCH_PX * ch);
    for &(y0, y1, fy) in &taps {
        for &(x0, x1, fx) in &taps {
            for c in 0..ch {
                let s = |x, y| f64::from(block.sample(x, y, c));
                let top = s(x0, y0) * (1.0 - fx) + s(x1, y0) * fx;
                let bottom = s(x0, y1) * (1.0 - fx) + s(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push(v.round_ties_even().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(Image::new(PATCH_PX, PATCH_PX, ch, out).expect("16x16 output"))
}

/// Learned per-cell positional embeddings (`grid_h * grid_w` rows of width d).
#[derive(Clone, Debug, PartialEq)]
pub struct PosEmbedTable {
    grid_h: usize,
    grid_w: usize,
    table: Matrix,
}

impl PosEmbedTable {
    pub fn init(grid_h: usize, grid_w: usize, d: usize, seed: u64) -> Self {
        let spec = ParamSpec::new("pos_embed", grid_h * grid_w, d, Init::TruncatedNormal);
        let table = init_params(&[spec], seed)
            .get("pos_embed")
            .expect("just created")
            .clone();
        Self {
            grid_h,
            grid_w,
            table,
        }
    }

    pub fn from_matrix(grid_h: usize, grid_w: usize, table: Matrix) -> Result<Self> {
        if table.rows() != grid_h * grid_w {
            return Err(TensorError::Invalid(format!(
                "positional table has {} rows, grid has {} cells",
                table.rows(),
                grid_h * grid_w
            ))
            .into());
        }
        Ok(Self {
            grid_h,
            grid_w,
            table,
        })
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        self.table.row(row * self.grid_w + col)
    }

    /// Mean of the cell vectors covered by `sp`, summed in row-major order.
    pub fn pooled(&self, sp: Superpatch) -> Vec<f32> {
        let mut acc = vec![0.0f32; self.dim()];
        for (r, c) in sp.cells() {
            for (a, v) in acc.iter_mut().zip(self.cell(r, c)) {
                *a += v;
            }
        }
        let n = sp.area() as f32;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

/// Supertoken embeddings with per-token origin and liveness.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub embeddings: Matrix,
    pub origins: Vec<Superpatch>,
    pub alive: Vec<bool>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn partition(&self) -> SuperpatchPartition {
        SuperpatchPartition::from_patches(self.grid_h, self.grid_w, self.origins.clone())
    }
}

pub fn embed_param_specs(d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(EMBED_WEIGHT, PATCH_INPUT_DIM, d, Init::TruncatedNormal),
        ParamSpec::new(EMBED_BIAS, 1, d, Init::Zeros),
    ]
}

/// Flattened, [0,1]-scaled 16x16 RGB input row for one superpatch.
pub fn superpatch_input(image: &Image, sp: Superpatch) -> Result<Vec<f32>> {
    let small = resize_bilinear(&extract_pixels(image, sp)?)?;
    Ok(small.data().iter().map(|&v| f32::from(v) / 255.0).collect())
}

/// Linear embedding of every superpatch plus its pooled positional vector.
/// Token order follows partition order.
pub fn embed(
    partition: &SuperpatchPartition,
    image: &Image,
    params: &ParamStore,
    pos: &PosEmbedTable,
    counter: Option<&mut MacCounter>,
) -> Result<TokenSet> {
    if image.channels() != 3 {
        return Err(SupertokenError::Channels(image.channels()));
    }
    if (pos.grid_h, pos.grid_w) != (partition.grid_h(), partition.grid_w()) {
        return Err(SupertokenError::PosTableShape {
            table: (pos.grid_h, pos.grid_w),
            grid: (partition.grid_h(), partition.grid_w()),
        });
    }
    let d = pos.dim();
    let weight = params.expect(EMBED_WEIGHT, PATCH_INPUT_DIM, d)?;
    let bias = params.expect(EMBED_BIAS, 1, d)?;

    let rows: Vec<Vec<f32>> = partition
        .patches()
        .par_iter()
        .map(|&sp| superpatch_input(image, sp))
        .collect::<Result<_>>()?;
    let n = rows.len();
    let input = Matrix::new(n, PATCH_INPUT_DIM, rows.concat())?;
    let mut tokens = matmul(&input, weight, counter)?;
    tokens.add_row_vector(bias.data())?;
    for (i, &sp) in partition.patches().iter().enumerate() {
        for (t, p) in tokens.row_mut(i).iter_mut().zip(pos.pooled(sp)) {
            *t += p;
        }
    }
    Ok(TokenSet {
        embeddings: tokens,
        origins: partition.patches().to_vec(),
        alive: vec![true; n],
        grid_h: partition.grid_h(),
        grid_w: partition.grid_w(),
    })
}

/// Spreads per-token labels over the cells each token covers. Returns the
/// patch-resolution map and its pixel-resolution block upsample.
pub fn broadcast_labels(
    partition: &SuperpatchPartition,
    labels: &[u8],
) -> Result<(LabelMap, LabelMap)> {
    if labels.len() != partition.len() {
        return Err(SupertokenError::LabelCount {
            labels: labels.len(),
            tokens: partition.len(),
        });
    }
    let (gh, gw) = (partition.grid_h(), partition.grid_w());
    let mut cells = LabelMap::zeros(gw, gh);
    for (sp, &l) in partition.patches().iter().zip(labels) {
        for (r, c) in sp.cells() {
            cells.set(c, r, l);
        }
    }
    Ok((cells.clone(), upsample_cells(&cells)))
}

/// Nearest-neighbour upsample of a patch-resolution map to pixels.
pub fn upsample_cells(cells: &LabelMap) -> LabelMap {
    let (w, h) = (cells.width() * PATCH_PX, cells.height() * PATCH_PX);
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            px.push(cells.get(x / PATCH_PX, y / PATCH_PX));
        }
    }
    LabelMap::new(w, h, px).expect("dimensions consistent")
}
