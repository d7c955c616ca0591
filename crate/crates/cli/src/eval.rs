//! `eval`: mIoU of a prediction directory against ground truth.
//!
//! Ground-truth files are `<stem>.gt.pgm` (or plain `<stem>.pgm` when no
//! `.gt.pgm` file exists). A prediction is `<stem>.pgm` or
//! `<stem>/labels.pgm` in the prediction directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use step_core::metrics::ConfusionMatrix;
use step_core::pixel_io::read_label_map;

use crate::error::{CliError, Result};
use crate::scenes::SCHEMA_VERSION;
use crate::segment::LABELS_FILE;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOutput {
    pub schema_version: u32,
    pub images: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| CliError::io(dir, e)))
        .collect::<Result<_>>()?;
    paths.sort();
    Ok(paths)
}

fn file_name(p: &Path) -> &str {
    p.file_name().and_then(|n| n.to_str()).unwrap_or("")
}

fn ground_truth_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let paths = list_dir(dir)?;
    let tagged: BTreeMap<_, _> = paths
        .iter()
        .filter_map(|p| {
            file_name(p)
                .strip_suffix(".gt.pgm")
                .map(|s| (s.to_string(), p.clone()))
        })
        .collect();
    if !tagged.is_empty() {
        return Ok(tagged);
    }
    Ok(paths
        .iter()
        .filter_map(|p| {
            file_name(p)
                .strip_suffix(".pgm")
                .map(|s| (s.to_string(), p.clone()))
        })
        .collect())
}

fn prediction_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut found = BTreeMap::new();
    for p in list_dir(dir)? {
        let name = file_name(&p).to_string();
        if p.is_dir() {
            let labels = p.join(LABELS_FILE);
            if labels.is_file() {
                found.insert(name, labels);
            }
        } else if let Some(stem) = name.strip_suffix(".pgm") {
            if !stem.ends_with(".gt") {
                found.insert(stem.to_string(), p);
            }
        }
    }
    Ok(found)
}

/// `num_classes` defaults to one past the largest label seen.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, num_classes: Option<usize>) -> Result<EvalOutput> {
    let gt = ground_truth_files(gt_dir)?;
    let pred = prediction_files(pred_dir)?;
    if gt.is_empty() {
        return Err(CliError::Input(format!(
            "{}: no ground-truth maps",
            gt_dir.display()
        )));
    }
    let missing: Vec<_> = gt
        .keys()
        .filter(|k| !pred.contains_key(*k))
        .cloned()
        .collect();
    let extra: Vec<_> = pred
        .keys()
        .filter(|k| !gt.contains_key(*k))
        .cloned()
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(CliError::Input(format!(
            "prediction and ground-truth sets differ: missing predictions {missing:?}, unmatched predictions {extra:?}"
        )));
    }
    let pairs = gt
        .par_iter()
        .map(|(stem, g)| {
            Ok((
                stem.clone(),
                read_label_map(&pred[stem])?,
                read_label_map(g)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let c = num_classes.unwrap_or_else(|| {
        pairs
            .iter()
            .flat_map(|(_, p, g)| p.labels().iter().chain(g.labels()))
            .copied()
            .max()
            .map_or(1, |m| m as usize + 1)
    });
    let mut cm = ConfusionMatrix::new(c)?;
    for (stem, p, g) in &pairs {
        cm.accumulate(p, g)
            .map_err(|e| CliError::Input(format!("{stem}: {e}")))?;
    }
    let report = cm.report()?;
    Ok(EvalOutput {
        schema_version: SCHEMA_VERSION,
        images: pairs.len(),
        per_class_iou: report.per_class_iou,
        miou: report.miou,
        pixel_accuracy: report.pixel_accuracy,
    })
}
