//! Synthetic corpus generation and loading.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use step_core::pixel_io::{
    generate_scene, read_image, read_label_map, write_image, write_label_map, Image, LabelMap,
    SceneSpec,
};
use step_core::rng::derive_seed;

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub name: String,
    pub image: String,
    pub ground_truth: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub spec: SceneSpec,
    pub scenes: Vec<SceneEntry>,
}

pub fn scene_name(i: usize) -> String {
    format!("scene_{i:04}")
}

/// Scene `i` uses `spec` with its seed replaced by one derived from
/// `(spec.seed, scene name)`.
pub fn gen_scenes(out: &Path, count: usize, spec: &SceneSpec) -> Result<Manifest> {
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let scenes = (0..count)
        .into_par_iter()
        .map(|i| {
            let name = scene_name(i);
            let seed = derive_seed(spec.seed, &name);
            let (image, labels) = generate_scene(&SceneSpec {
                seed,
                ..spec.clone()
            })?;
            let entry = SceneEntry {
                image: format!("{name}.ppm"),
                ground_truth: format!("{name}.gt.pgm"),
                name,
                seed,
            };
            write_image(&image, out.join(&entry.image))?;
            write_label_map(&labels, out.join(&entry.ground_truth))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        spec: spec.clone(),
        scenes,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub struct Scene {
    pub name: String,
    pub image: Image,
    pub ground_truth: LabelMap,
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn load_corpus(dir: &Path) -> Result<Vec<Scene>> {
    load_manifest(dir)?
        .scenes
        .into_par_iter()
        .map(|e| {
            Ok(Scene {
                image: read_image(dir.join(&e.image))?,
                ground_truth: read_label_map(dir.join(&e.ground_truth))?,
                name: e.name,
            })
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}
