//! Synthetic labeled scenes with exact ground truth.

use serde::{Deserialize, Serialize};

use super::{Image, LabelMap, PixelError, Result};
use crate::rng::{derive_seed, mix64, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Disk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Side length in pixels (scenes are square).
    pub size: usize,
    pub num_classes: u32,
    pub num_shapes: usize,
    pub shape_kinds: Vec<ShapeKind>,
    /// Standard deviation of additive Gaussian noise, in 8-bit sample units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 512,
            num_classes: 8,
            num_shapes: 4,
            shape_kinds: vec![ShapeKind::Rectangle, ShapeKind::Disk],
            noise_sigma: 2.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(PixelError::InvalidImage(msg));
        if self.size < 16 {
            return bad(format!("scene size {} below 16", self.size));
        }
        if !(2..=256).contains(&self.num_classes) {
            return bad(format!("num_classes {} outside 2..=256", self.num_classes));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            ));
        }
        if self.num_shapes > 0 && self.shape_kinds.is_empty() {
            return bad("shapes requested but no shape kinds allowed".into());
        }
        Ok(())
    }
}

/// A painted region. Bounds are in pixels; rectangles are half-open.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Rectangle {
        x0: i64,
        y0: i64,
        x1: i64,
        y1: i64,
        class: u8,
    },
    Disk {
        cx: i64,
        cy: i64,
        radius: i64,
        class: u8,
    },
}

impl Shape {
    pub fn class(&self) -> u8 {
        match *self {
            Shape::Rectangle { class, .. } | Shape::Disk { class, .. } => class,
        }
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        match *self {
            Shape::Rectangle { x0, y0, x1, y1, .. } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disk { cx, cy, radius, .. } => {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= radius * radius
            }
        }
    }

    /// Inclusive-exclusive bounding box `(x0, y0, x1, y1)`.
    fn bounds(&self) -> (i64, i64, i64, i64) {
        match *self {
            Shape::Rectangle { x0, y0, x1, y1, .. } => (x0, y0, x1, y1),
            Shape::Disk { cx, cy, radius, .. } => {
                (cx - radius, cy - radius, cx + radius + 1, cy + radius + 1)
            }
        }
    }
}

/// Fixed palette: class index to RGB through a 64-bit mix.
pub fn class_color(class: u8) -> [u8; 3] {
    let h = mix64(u64::from(class)).to_le_bytes();
    [h[0], h[1], h[2]]
}

/// Shape list drawn by [`generate_scene`], in paint order.
pub fn plan_shapes(spec: &SceneSpec) -> Result<Vec<Shape>> {
    spec.validate()?;
    let mut rng = SeededRng::new(derive_seed(spec.seed, "shapes"));
    let size = spec.size as u64;
    let (lo, hi) = ((size / 16).max(1), (size / 3).max(1));
    let mut shapes = Vec::with_capacity(spec.num_shapes);
    for _ in 0..spec.num_shapes {
        let kind =
            spec.shape_kinds[rng.range_inclusive(0, spec.shape_kinds.len() as u64 - 1) as usize];
        let class = rng.range_inclusive(1, u64::from(spec.num_classes) - 1) as u8;
        let shape = match kind {
            ShapeKind::Rectangle => {
                let w = rng.range_inclusive(lo, hi);
                let h = rng.range_inclusive(lo, hi);
                let x0 = rng.range_inclusive(0, size - w) as i64;
                let y0 = rng.range_inclusive(0, size - h) as i64;
                Shape::Rectangle {
                    x0,
                    y0,
                    x1: x0 + w as i64,
                    y1: y0 + h as i64,
                    class,
                }
            }
            ShapeKind::Disk => Shape::Disk {
                cx: rng.range_inclusive(0, size - 1) as i64,
                cy: rng.range_inclusive(0, size - 1) as i64,
                radius: rng.range_inclusive(lo / 2, hi / 2).max(1) as i64,
                class,
            },
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

/// Renders a scene: background class 0, shapes painted in order, then
/// Gaussian noise (rounded half-to-even, clamped to `[0, 255]`).
pub fn generate_scene(spec: &SceneSpec) -> Result<(Image, LabelMap)> {
    let shapes = plan_shapes(spec)?;
    let n = spec.size as i64;
    let mut labels = LabelMap::zeros(spec.size, spec.size);
    for shape in &shapes {
        let (x0, y0, x1, y1) = shape.bounds();
        for y in y0.max(0)..y1.min(n) {
            for x in x0.max(0)..x1.min(n) {
                if shape.contains(x, y) {
                    labels.set(x as usize, y as usize, shape.class());
                }
            }
        }
    }

    let mut data = Vec::with_capacity(spec.size * spec.size * 3);
    for &l in labels.labels() {
        data.extend_from_slice(&class_color(l));
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = SeededRng::new(derive_seed(spec.seed, "noise"));
        for v in &mut data {
            let noisy = f64::from(*v) + spec.noise_sigma * rng.standard_normal();
            *v = noisy.round_ties_even().clamp(0.0, 255.0) as u8;
        }
    }
    let image = Image::new(spec.size, spec.size, 3, data)?;
    Ok((image, labels))
}
