//! `sweep`: FLOPs of every zero-, one- and two-head placement.

use std::fs;
use std::path::Path;

use serde::Serialize;

use step_core::cost::{sweep_head_placements, sweep_table, ScheduleModel, SweepRow};
use step_core::encoder::ArchConfig;

use crate::corpus::write_text;
use crate::error::{CliError, Result};
use crate::scenes::{write_json, SCHEMA_VERSION};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub arch: ArchConfig,
    pub tokens: usize,
    pub model: ScheduleModel,
    pub rows: Vec<SweepRow>,
}

pub fn cmd_sweep(
    arch: &ArchConfig,
    tokens: usize,
    model: ScheduleModel,
    out: &Path,
) -> Result<SweepReport> {
    if tokens == 0 {
        return Err(CliError::Usage("--tokens must be positive".into()));
    }
    let fraction_ok = |f: f64| f > 0.0 && f <= 1.0;
    let valid = match model {
        ScheduleModel::LinearDepth { terminal } => fraction_ok(terminal),
        ScheduleModel::Constant { fraction } => fraction_ok(fraction),
    };
    if !valid {
        return Err(CliError::Usage(format!(
            "survivor fraction outside (0,1]: {model:?}"
        )));
    }
    let rows = sweep_head_placements(arch, tokens, &model)?;
    let report = SweepReport {
        schema_version: SCHEMA_VERSION,
        arch: *arch,
        tokens,
        model,
        rows,
    };
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_json(&out.join("sweep.json"), &report)?;
    write_text(&out.join("sweep.txt"), &sweep_table(&report.rows))?;
    Ok(report)
}
