//! Base patch grid and quadtree-aligned superpatch partitions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pixel_io::Image;

/// Side of a base patch, in pixels.
pub const PATCH_PX: usize = 16;

/// Allowed superpatch sides, in patch units, finest first.
pub const SUPERPATCH_SIZES: [usize; 5] = [1, 2, 4, 8, 16];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("image {width}x{height} is smaller than one {PATCH_PX}x{PATCH_PX} patch")]
    ImageTooSmall { width: usize, height: usize },
    #[error("superpatch {0:?} has unsupported size")]
    InvalidSize(Superpatch),
    #[error("superpatch {0:?} is not aligned to its size")]
    Misaligned(Superpatch),
    #[error("superpatch {0:?} extends outside the {1}x{2} grid")]
    OutOfBounds(Superpatch, usize, usize),
    #[error("cell ({row}, {col}) is covered more than once")]
    Overlap { row: usize, col: usize },
    #[error("cell ({row}, {col}) is not covered")]
    Gap { row: usize, col: usize },
}

/// Center-cropped image plus its patch grid dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    image: Image,
    offset_x: usize,
    offset_y: usize,
    grid_h: usize,
    grid_w: usize,
}

/// Center-crops the image to multiples of [`PATCH_PX`] and records the grid.
pub fn make_grid(image: &Image) -> Result<PatchGrid, GridError> {
    let (w, h) = (image.width(), image.height());
    if w < PATCH_PX || h < PATCH_PX {
        return Err(GridError::ImageTooSmall {
            width: w,
            height: h,
        });
    }
    let (cw, ch) = (w / PATCH_PX * PATCH_PX, h / PATCH_PX * PATCH_PX);
    let (ox, oy) = ((w - cw) / 2, (h - ch) / 2);
    let cropped = if (cw, ch) == (w, h) {
        image.clone()
    } else {
        image
            .crop(ox, oy, cw, ch)
            .expect("crop lies inside the image")
    };
    Ok(PatchGrid {
        image: cropped,
        offset_x: ox,
        offset_y: oy,
        grid_h: ch / PATCH_PX,
        grid_w: cw / PATCH_PX,
    })
}

impl PatchGrid {
    /// The cropped image the grid tiles.
    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn crop_offset(&self) -> (usize, usize) {
        (self.offset_x, self.offset_y)
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn superpatch_pixels(&self, sp: Superpatch) -> Result<Image, GridError> {
        if !sp.fits(self.grid_h, self.grid_w) {
            return Err(GridError::OutOfBounds(sp, self.grid_h, self.grid_w));
        }
        extract_pixels(&self.image, sp)
    }
}

/// Square block of base patches; `row`/`col` are the top-left cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Superpatch {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl Superpatch {
    pub fn new(row: usize, col: usize, size: usize) -> Self {
        Self { row, col, size }
    }

    pub fn is_aligned(&self) -> bool {
        self.size > 0 && self.row.is_multiple_of(self.size) && self.col.is_multiple_of(self.size)
    }

    pub fn fits(&self, grid_h: usize, grid_w: usize) -> bool {
        self.row + self.size <= grid_h && self.col + self.size <= grid_w
    }

    pub fn contains_cell(&self, row: usize, col: usize) -> bool {
        (self.row..self.row + self.size).contains(&row)
            && (self.col..self.col + self.size).contains(&col)
    }

    /// Covered cells, row-major.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row..self.row + self.size)
            .flat_map(move |r| (self.col..self.col + self.size).map(move |c| (r, c)))
    }

    pub fn area(&self) -> usize {
        self.size * self.size
    }
}

/// Pixel block covered by a superpatch, as a contiguous sub-image.
pub fn extract_pixels(image: &Image, sp: Superpatch) -> Result<Image, GridError> {
    let side = sp.size * PATCH_PX;
    let (x0, y0) = (sp.col * PATCH_PX, sp.row * PATCH_PX);
    if sp.size == 0 || x0 + side > image.width() || y0 + side > image.height() {
        return Err(GridError::OutOfBounds(
            sp,
            image.height() / PATCH_PX,
            image.width() / PATCH_PX,
        ));
    }
    Ok(image.crop(x0, y0, side, side).expect("bounds checked"))
}

/// Tiling of the grid into superpatches. Constructors in this crate emit
/// superpatches in row-major order of their top-left corner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpatchPartition {
    grid_h: usize,
    grid_w: usize,
    patches: Vec<Superpatch>,
}

impl SuperpatchPartition {
    /// Unchecked constructor; call [`validate_partition`] before trusting it.
    pub fn from_patches(grid_h: usize, grid_w: usize, patches: Vec<Superpatch>) -> Self {
        Self {
            grid_h,
            grid_w,
            patches,
        }
    }

    /// Every cell its own 1x1 superpatch.
    pub fn uniform(grid_h: usize, grid_w: usize) -> Self {
        let patches = (0..grid_h)
            .flat_map(|r| (0..grid_w).map(move |c| Superpatch::new(r, c, 1)))
            .collect();
        Self::from_patches(grid_h, grid_w, patches)
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patches(&self) -> &[Superpatch] {
        &self.patches
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Sorts into canonical row-major order.
    pub fn sort_row_major(&mut self) {
        self.patches.sort_by_key(|p| (p.row, p.col));
    }

    /// Superpatch counts indexed like [`SUPERPATCH_SIZES`].
    pub fn counts_by_size(&self) -> [usize; 5] {
        let mut counts = [0; 5];
        for p in &self.patches {
            if let Some(i) = SUPERPATCH_SIZES.iter().position(|&s| s == p.size) {
                counts[i] += 1;
            }
        }
        counts
    }

    /// For each grid cell (row-major), the index of the superpatch covering it.
    pub fn cell_owners(&self) -> Vec<usize> {
        let mut owners = vec![usize::MAX; self.cells()];
        for (i, p) in self.patches.iter().enumerate() {
            for (r, c) in p.cells() {
                owners[r * self.grid_w + c] = i;
            }
        }
        owners
    }

    /// JSON array of `{row, col, size}` objects in stored order.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.patches).expect("plain structs serialize")
    }

    pub fn from_json(grid_h: usize, grid_w: usize, json: &str) -> serde_json::Result<Self> {
        Ok(Self::from_patches(
            grid_h,
            grid_w,
            serde_json::from_str(json)?,
        ))
    }
}

/// Checks supported sizes, quadtree alignment, bounds, and exact cover.
pub fn validate_partition(p: &SuperpatchPartition) -> Result<(), GridError> {
    for &sp in &p.patches {
        if !SUPERPATCH_SIZES.contains(&sp.size) {
            return Err(GridError::InvalidSize(sp));
        }
        if !sp.is_aligned() {
            return Err(GridError::Misaligned(sp));
        }
        if !sp.fits(p.grid_h, p.grid_w) {
            return Err(GridError::OutOfBounds(sp, p.grid_h, p.grid_w));
        }
    }
    let mut covered = vec![false; p.cells()];
    for sp in &p.patches {
        for (row, col) in sp.cells() {
            let seen = &mut covered[row * p.grid_w + col];
            if *seen {
                return Err(GridError::Overlap { row, col });
            }
            *seen = true;
        }
    }
    if let Some(i) = covered.iter().position(|&c| !c) {
        return Err(GridError::Gap {
            row: i / p.grid_w,
            col: i % p.grid_w,
        });
    }
    Ok(())
}
